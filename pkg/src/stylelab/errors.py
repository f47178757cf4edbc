"""Exception hierarchy shared across stylelab."""


class StyleLabError(Exception):
    pass


class DimensionError(StyleLabError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(StyleLabError, ValueError):
    """An argument is outside its documented range."""


class ContractError(StyleLabError, RuntimeError):
    pass


class InputError(StyleLabError, ValueError):
    pass


class VocabularyError(StyleLabError, KeyError):
    def __init__(self, token, known):
        self.token = token
        self.known = list(known)
        super().__init__(f"unknown token {token!r}; known tokens: {', '.join(self.known)}")

    def __str__(self):
        return self.args[0]


class FormatError(StyleLabError, ValueError):
    """A file is truncated or malformed. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class IncompatibilityError(StyleLabError, ValueError):
    pass


class TraceIntegrityError(StyleLabError, RuntimeError):
    pass


class StateError(StyleLabError, RuntimeError):
    pass


class NumericError(StyleLabError, FloatingPointError):
    pass
