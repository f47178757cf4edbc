"""Length-prefixed JSON metadata followed by raw tensor containers.

Layout: 8-byte magic, u32 metadata length, UTF-8 JSON metadata, then one
``STLTNSR1`` tensor per name listed in ``metadata["tensors"]``, in order.
"""

import io
import json
import os
import struct
import tempfile

from .errors import FormatError
from .tensor import read_tensor, write_tensor


def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def pack(magic, meta, arrays):
    """``arrays`` is an ordered list of (name, ndarray)."""
    meta = dict(meta)
    meta["tensors"] = [name for name, _ in arrays]
    blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, arr in arrays:
        write_tensor(buf, arr)
    return buf.getvalue()


def unpack(raw, magic):
    fh = io.BytesIO(raw)
    head = fh.read(len(magic))
    if head != magic:
        raise FormatError(f"bad magic {head!r}, expected {magic!r}", 0)
    size_bytes = fh.read(4)
    if len(size_bytes) != 4:
        raise FormatError("truncated metadata length", fh.tell())
    (size,) = struct.unpack("<I", size_bytes)
    blob = fh.read(size)
    if len(blob) != size:
        raise FormatError("truncated metadata block", fh.tell())
    try:
        meta = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", len(magic) + 4) from exc
    arrays = {}
    for name in meta.get("tensors", []):
        arrays[name] = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after last tensor", fh.tell() - 1)
    return meta, arrays


def save(path, magic, meta, arrays):
    atomic_write_bytes(path, pack(magic, meta, arrays))


def load(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    return unpack(raw, magic)
