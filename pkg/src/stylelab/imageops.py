"""Patch (un)folding, fixed sinusoidal embeddings and PPM I/O."""

import numpy as np

from .errors import FormatError


def patchify(images, p):
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p), patches in row-major grid order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), c * p * p))


def unpatchify(tokens, p, c, h, w):
    b = tokens.shape[0]
    x = tokens.reshape(b, h // p, w // p, c, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(b, c, h, w))


def sincos_1d(positions, dim, max_period=10000.0):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=1)
    return emb


def sincos_2d(grid, dim):
    """Fixed 2-D position table of shape (grid*grid, dim)."""
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    half = dim // 2
    return np.concatenate([sincos_1d(ys, half), sincos_1d(xs, dim - half)], axis=1)


def timestep_embedding(t, dim):
    return sincos_1d(t, dim)


def to_uint8(image):
    """[-1, 1] float (C, H, W) -> uint8 (H, W, C)."""
    x = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels):
    return (pixels.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5)) - np.float32(1.0)


def ppm_bytes(image):
    px = to_uint8(image)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def write_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM: {fields[0]!r}", 0)
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    pos += 1
    payload = raw[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError("truncated PPM payload", pos + len(payload))
    return from_uint8(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))
