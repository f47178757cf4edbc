"""Patch-token transformer noise predictor with decoupled text/image cross-attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .conditioning import ConditionPair
from .errors import DimensionError, ParameterError
from .imageops import patchify, sincos_2d, timestep_embedding, unpatchify
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    width: int = 64
    heads: int = 2
    layers: int = 8
    text_width: int = 64
    image_width: int = 64
    time_width: int = 64
    text_tokens: int = 3
    image_tokens: int = 4
    mlp_ratio: int = 2
    vocab_size: int = 9
    encoder_width: int = 64
    prediction: str = "v"  # output parametrization: "eps" (raw) or "v" (skip-connected, see Denoiser)

    def validate(self):
        for name in ("image_size", "channels", "patch_size", "width", "heads", "layers",
                     "text_width", "image_width", "time_width", "text_tokens", "image_tokens",
                     "mlp_ratio", "vocab_size", "encoder_width"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.prediction not in ("eps", "v"):
            raise ParameterError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")
        if self.width % self.heads:
            raise ParameterError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image size {self.image_size} is not divisible by patch {self.patch_size}")
        return self

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        return self.grid**2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    def to_dict(self):
        return asdict(self)


def split_heads(x, heads):
    b, n, w = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, w // heads)), (0, 2, 1, 3))


def merge_heads(x):
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def attention(q, k, v, heads):
    """softmax(Q K^T / sqrt(d_head)) V per head; inputs (B, N, W), (B, L, W), (B, L, W)."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    d = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d))
    return merge_heads(T.matmul(T.softmax(scores), vh))


class SelfAttention(Module):
    def __init__(self, rng, width, heads, out_std):
        self.q = Linear(rng, width, width, bias=False)
        self.k = Linear(rng, width, width, bias=False)
        self.v = Linear(rng, width, width, bias=False)
        self.out = Linear(rng, width, width, std=out_std)
        self._heads = heads

    def __call__(self, x):
        return self.out(attention(self.q(x), self.k(x), self.v(x), self._heads))


class DualCrossAttention(Module):
    """Text branch and image branch share the query; Z = Z_t + scale * Z_i, then the output projection."""

    def __init__(self, rng, width, heads, text_width, image_width, index, out_std):
        self.q = Linear(rng, width, width, bias=False)
        self.k = Linear(rng, text_width, width, bias=False)
        self.v = Linear(rng, text_width, width, bias=False)
        self.ik = Linear(rng, image_width, width, bias=False)
        self.iv = Linear(rng, image_width, width, bias=False)
        if image_width == text_width:
            self.ik.weight.data = self.k.weight.data.copy()
            self.iv.weight.data = self.v.weight.data.copy()
        self.out = Linear(rng, width, width, std=out_std)
        self._heads = heads
        self._index = index
        self._width = width
        self._text_width = text_width
        self._image_width = image_width
        self.image_scale = 1.0
        self.multiplier = 1.0
        self.probe = None

    @property
    def index(self):
        return self._index

    @property
    def head_dim(self):
        return self._width // self._heads

    @property
    def effective_scale(self):
        return max(0.0, float(self.image_scale) * float(self.multiplier))

    def branches(self, z, c_t, c_i):
        """Return (Z, Z_t, Z_i) before the output projection; Z_i is None without an image condition."""
        if z.shape[-1] != self._width or c_t.shape[-1] != self._text_width:
            raise DimensionError(f"cross-attention widths: tokens {z.shape}, text {c_t.shape}")
        q = self.q(z)
        z_t = attention(q, self.k(c_t), self.v(c_t), self._heads)
        if c_i is None:
            return z_t, z_t, None
        if c_i.shape[-1] != self._image_width:
            raise DimensionError(f"image condition width {c_i.shape} != {self._image_width}")
        z_i = attention(q, self.ik(c_i), self.iv(c_i), self._heads)
        z = T.add(z_t, T.scale(z_i, self.effective_scale))
        return z, z_t, z_i

    def __call__(self, z, c_t, c_i):
        zz, z_t, z_i = self.branches(z, c_t, c_i)
        if self.probe is not None and z_i is not None:
            self.probe(self._index, zz.data, z_t.data, z_i.data)
        return self.out(zz)


def dual_attention_forward(layer, z_in, c_t, c_i):
    """Single-sample entry point: (tokens, width) inputs, returns (Z, Z_t, Z_i) as 2-D tensors."""
    z_in, c_t, c_i = (T.as_tensor(a) for a in (z_in, c_t, c_i))
    unbatch = z_in.ndim == 2
    if unbatch:
        z_in, c_t, c_i = (T.reshape(a, (1,) + a.shape) for a in (z_in, c_t, c_i))
    z, z_t, z_i = layer.branches(z_in, c_t, c_i)
    if unbatch:
        z, z_t, z_i = (T.reshape(a, a.shape[1:]) for a in (z, z_t, z_i))
    return z, z_t, z_i


class Block(Module):
    def __init__(self, rng, cfg, index):
        w = cfg.width
        out_std = 0.5 / math.sqrt(w * cfg.layers)
        self.time = Linear(rng, w, w, zero=True)
        self.norm1 = LayerNorm(w)
        self.attn = SelfAttention(rng, w, cfg.heads, out_std)
        self.norm2 = LayerNorm(w)
        self.cross = DualCrossAttention(rng, w, cfg.heads, cfg.text_width, cfg.image_width, index, out_std)
        self.norm3 = LayerNorm(w)
        self.fc1 = Linear(rng, w, w * cfg.mlp_ratio)
        self.fc2 = Linear(rng, w * cfg.mlp_ratio, w, std=out_std)

    def __call__(self, x, temb, c_t, c_i):
        b, n, w = x.shape
        x = T.add(x, T.expand(T.reshape(self.time(temb), (b, 1, w)), x.shape))
        x = T.add(x, self.attn(self.norm1(x)))
        x = T.add(x, self.cross(self.norm2(x), c_t, c_i))
        return T.add(x, self.fc2(T.silu(self.fc1(self.norm3(x)))))


class Denoiser(Module):
    """Predicts the added noise from (x_t, t, text condition, image condition)."""

    def __init__(self, cfg, rng):
        cfg.validate()
        self._cfg = cfg
        w = cfg.width
        self._pos = sincos_2d(cfg.grid, w).reshape(1, cfg.tokens, w)
        self.patch_in = Linear(rng, cfg.patch_dim, w)
        self.time1 = Linear(rng, cfg.time_width, w)
        self.time2 = Linear(rng, w, w)
        self.blocks = [Block(rng, cfg, d) for d in range(cfg.layers)]
        self.norm_out = LayerNorm(w)
        self.head = Linear(rng, w, cfg.patch_dim, zero=True)

    @property
    def config(self):
        return self._cfg

    @property
    def cross_layers(self):
        return [b.cross for b in self.blocks]

    def time_embedding(self, t):
        emb = Tensor(timestep_embedding(np.asarray(t), self._cfg.time_width))
        return T.silu(self.time2(T.silu(self.time1(emb))))

    def forward_tokens(self, x_t, t, cond, alpha_bar=None):
        """x_t: (B, C, H, W) array; returns predicted noise as (B, tokens, patch_dim) Tensor.

        With ``prediction == "v"`` the network output F is combined with the
        input as eps = sqrt(1 - a) x_t + sqrt(a) F, where ``a`` is alpha_bar at
        each row's timestep. The network then only has to model the bounded
        quantity F, and the implied x0 estimate stays finite at high noise.
        ``alpha_bar`` defaults to the standard 1000-step schedule.
        """
        cfg = self._cfg
        x_t = np.asarray(x_t)
        if x_t.ndim != 4 or x_t.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(f"expected (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {x_t.shape}")
        b = x_t.shape[0]
        c_t, c_i = cond.text, cond.image
        if c_t.shape[0] != b or (c_i is not None and c_i.shape[0] != b):
            raise DimensionError(f"condition batch {c_t.shape} does not match x_t batch {b}")
        patches = patchify(x_t, cfg.patch_size)
        x = self.patch_in(Tensor(patches))
        x = T.add(x, Tensor(np.broadcast_to(self._pos, x.shape)))
        temb = self.time_embedding(t)
        for block in self.blocks:
            x = block(x, temb, c_t, c_i)
        out = self.head(self.norm_out(x))
        if cfg.prediction == "eps":
            return out
        a = _row_alpha_bar(t, alpha_bar, b).reshape(b, 1, 1)
        dtype = out.data.dtype
        skip = Tensor((np.sqrt(1.0 - a) * patches).astype(dtype))
        gain = Tensor(np.broadcast_to(np.sqrt(a), out.shape).astype(dtype))
        return T.add(skip, T.mul(out, gain))

    def predict_eps(self, x_t, t, cond, alpha_bar=None):
        cfg = self._cfg
        with T.no_grad():
            tok = self.forward_tokens(x_t, t, cond, alpha_bar)
        return unpatchify(tok.data, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)

    def set_probe(self, hook):
        for layer in self.cross_layers:
            layer.probe = hook


_DEFAULT_ALPHA_BAR = None


def _row_alpha_bar(t, alpha_bar, b):
    """alpha_bar per batch row; ``alpha_bar`` is either per-row values or None for the default schedule."""
    global _DEFAULT_ALPHA_BAR
    if alpha_bar is None:
        if _DEFAULT_ALPHA_BAR is None:
            from .diffusion import make_schedule

            _DEFAULT_ALPHA_BAR = make_schedule(1000).alpha_bar
        alpha_bar = _DEFAULT_ALPHA_BAR[np.asarray(t, dtype=np.int64)]
    a = np.broadcast_to(np.asarray(alpha_bar, dtype=np.float64), (b,))
    if np.any(a <= 0) or np.any(a > 1):
        raise ParameterError("alpha_bar values must lie in (0, 1]")
    return a


def build_denoiser(cfg, seed):
    if not isinstance(cfg, DenoiserConfig):
        raise ParameterError("build_denoiser needs a DenoiserConfig")
    cfg.validate()
    return Denoiser(cfg, np.random.default_rng(seed))


def set_layer_scales(model, scales, multiplier=1.0):
    """Install per-layer image scales; each layer uses scales[d] * multiplier."""
    values = list(getattr(scales, "scales", scales))
    layers = model.cross_layers
    if len(values) != len(layers):
        raise ParameterError(f"got {len(values)} scales for {len(layers)} cross-attention layers")
    if multiplier < 0:
        raise ParameterError("multiplier must be non-negative")
    for layer, s in zip(layers, values):
        layer.image_scale = float(s)
        layer.multiplier = float(multiplier)


def effective_scales(model):
    return [layer.effective_scale for layer in model.cross_layers]
