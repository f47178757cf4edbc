"""Text and image conditions for the denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import IMAGE_SIZE, MODIFIERS, SUBJECTS, validate_image
from .errors import DimensionError, ParameterError, VocabularyError
from .imageops import patchify, sincos_2d
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor

PAD = "<pad>"


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ParameterError("duplicate vocabulary tokens")
        if not tokens or tokens[0] != PAD:
            raise ParameterError(f"vocabulary must start with {PAD}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(token, self.tokens[1:]) from None

    @classmethod
    def default(cls):
        return cls([PAD, *SUBJECTS, *MODIFIERS])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


@dataclass
class TextCondition:
    token_ids: np.ndarray  # (Lt,)
    embedding: Tensor  # (Lt, width_t)


@dataclass
class ImageEmbedding:
    tokens: Tensor  # (Li, width_i)
    source: str = "single-image"
    count: int = 1

    @property
    def data(self):
        return self.tokens.data


@dataclass
class ConditionPair:
    """Batched condition: text (B, Lt, Wt) and optional image (B, Li, Wi) tokens."""

    text: Tensor
    image: Tensor | None = None

    @property
    def batch(self):
        return self.text.shape[0]


def token_ids(vocab, subject, modifiers=(), length=3):
    if subject not in SUBJECTS:
        raise VocabularyError(subject, [t for t in vocab.tokens[1:]])
    ids = [vocab.id(subject)] + [vocab.id(m) for m in modifiers]
    if len(ids) > length:
        raise ParameterError(f"prompt longer than {length} tokens")
    return np.asarray(ids + [vocab.id(PAD)] * (length - len(ids)), dtype=np.int64)


class TextEmbedder(Module):
    """Learned token table plus learned positions, layer-normed."""

    def __init__(self, rng, vocab_size, width, length=3):
        self.table = param(rng.normal(0.0, 1.0, size=(vocab_size, width)))
        self.position = param(rng.normal(0.0, 0.1, size=(length, width)))
        self.norm = LayerNorm(width)
        self._length = length

    def __call__(self, ids):
        ids = np.asarray(ids)
        b = ids.shape[0]
        x = T.index_rows(self.table, ids)  # (B, Lt, W)
        pos = T.expand(T.reshape(self.position, (1,) + self.position.shape), x.shape)
        return self.norm(T.add(x, pos))

    @property
    def length(self):
        return self._length


def encode_prompt(vocab, embedder, subject, modifiers=()):
    ids = token_ids(vocab, subject, modifiers, embedder.length)
    with T.no_grad():
        emb = embedder(ids[None])
    return TextCondition(ids, Tensor(emb.data[0]))


class ImageEncoder(Module):
    """Patch MLP, then ``tokens`` learned queries attend over patches, plus a global pooled path."""

    def __init__(self, rng, width, out_width, tokens=4, patch=4, channels=3, image_size=IMAGE_SIZE):
        self._patch = patch
        self._shape = (channels, image_size, image_size)
        n_patch = (image_size // patch) ** 2
        self._pos = sincos_2d(image_size // patch, width).reshape(1, n_patch, width)
        self.embed = Linear(rng, channels * patch * patch, width)
        self.mix = Linear(rng, width, width)
        self.norm = LayerNorm(width)
        self.queries = param(rng.normal(0.0, 1.0, size=(tokens, width)))
        self.key = Linear(rng, width, width, bias=False)
        self.value = Linear(rng, width, width, bias=False)
        self.pooled = Linear(rng, width, tokens * out_width)
        self.out = Linear(rng, width, out_width)
        self.out_norm = LayerNorm(out_width)
        self._tokens = tokens
        self._out_width = out_width

    @property
    def tokens(self):
        return self._tokens

    def __call__(self, images):
        images = np.asarray(images)
        b = images.shape[0]
        x = Tensor(patchify(images, self._patch))
        h = self.embed(x)
        h = T.add(h, Tensor(np.broadcast_to(self._pos, h.shape)))
        h = self.norm(self.mix(T.gelu(h)))
        k = self.key(h)
        v = self.value(h)
        w = h.shape[-1]
        q = T.expand(T.reshape(self.queries, (1,) + self.queries.shape), (b,) + self.queries.shape)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(w)))
        attended = self.out(T.matmul(att, v))
        glob = T.reshape(self.pooled(T.tmean(h, axis=1)), (b, self._tokens, self._out_width))
        return self.out_norm(T.add(attended, glob))


def encode_image(encoder, image):
    """Embed one (C, H, W) image in [-1, 1] with a frozen encoder."""
    image = validate_image(image, encoder._shape)
    with T.no_grad():
        out = encoder(image[None])
    return ImageEmbedding(Tensor(out.data[0]), "single-image", 1)


def encode_images(encoder, images, batch=64):
    images = np.asarray(images)
    for img in images:
        validate_image(img, encoder._shape)
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            outs.append(encoder(images[i : i + batch]).data)
    return np.concatenate(outs, axis=0)


def mean_sorted(stack):
    """Mean over axis 0, invariant to the order of the inputs.

    Values are sorted per element, summed left to right in float64, divided
    by N and rounded back to the input dtype once.
    """
    stack = np.asarray(stack)
    acc = np.sort(stack.astype(np.float64), axis=0)
    total = np.zeros(stack.shape[1:], dtype=np.float64)
    for row in acc:
        total += row
    return (total / stack.shape[0]).astype(stack.dtype)


def average_embeddings(embs):
    """Token-position-wise mean of single-image embeddings."""
    if not embs:
        raise ParameterError("cannot average an empty embedding list")
    shapes = {e.tokens.shape for e in embs}
    if len(shapes) != 1:
        raise DimensionError(f"embedding shapes differ: {sorted(shapes)}")
    if any(e.source != "single-image" for e in embs):
        raise ParameterError("only single-image embeddings can be averaged")
    mean = mean_sorted(np.stack([e.tokens.data for e in embs]))
    return ImageEmbedding(Tensor(mean), "averaged", len(embs))


def condition_batch(text_embeddings, image_embedding=None):
    """Stack per-sample text embeddings and repeat one image embedding across the batch."""
    text = np.stack([t.embedding.data if isinstance(t, TextCondition) else np.asarray(t) for t in text_embeddings])
    image = None
    if image_embedding is not None:
        arr = image_embedding.data if isinstance(image_embedding, ImageEmbedding) else np.asarray(image_embedding)
        image = np.broadcast_to(arr, (len(text),) + arr.shape[-2:]).copy() if arr.ndim == 2 else arr
    return ConditionPair(Tensor(text), None if image is None else Tensor(image))
