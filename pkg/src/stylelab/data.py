"""Procedural style corpus: shape subjects rendered in controllable styles.

A style fixes the palette, background pattern, stroke width and a geometric
distortion; the subject fixes the silhouette. Silhouettes depend only on
(subject, size, distortion, seed) and coloring only on the style, so style
and content are separable by construction.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError, ParameterError, VocabularyError
from .imageops import read_ppm, write_ppm

SUBJECTS = ("circle", "square", "triangle", "star", "cross", "ring")
MODIFIERS = ("small", "large")
PATTERNS = ("solid", "stripes", "noise-grain")
IMAGE_SIZE = 32
SUPERSAMPLE = 2
MAX_STROKE = 3
MAX_DISTORTION = 0.6


@dataclass(frozen=True)
class StyleSpec:
    style_id: str
    palette: tuple  # (background, fill, stroke) RGB triples in [0, 1]
    pattern: str = "solid"
    stroke_width: int = 1
    distortion: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.palette) != 3 or any(len(c) != 3 for c in self.palette):
            raise ParameterError("palette needs three RGB anchors")
        if any(not 0.0 <= v <= 1.0 for c in self.palette for v in c):
            raise ParameterError("palette channels must be in [0, 1]")
        if self.pattern not in PATTERNS:
            raise ParameterError(f"pattern must be one of {PATTERNS}")
        if not 0 <= self.stroke_width <= MAX_STROKE:
            raise ParameterError(f"stroke width must be in [0, {MAX_STROKE}]")
        if not 0.0 <= self.distortion <= MAX_DISTORTION:
            raise ParameterError(f"distortion must be in [0, {MAX_DISTORTION}]")

    def to_dict(self):
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["palette"] = tuple(tuple(float(v) for v in c) for c in d["palette"])
        return cls(**d)

    def params_key(self):
        """Everything except the id; used for leakage checks."""
        return (self.palette, self.pattern, self.stroke_width, round(self.distortion, 6))


def _hsv(h, s, v):
    return tuple(round(float(c), 4) for c in colorsys.hsv_to_rgb(h % 1.0, s, v))


def _style(sid, hue, pattern, stroke, distortion, dark_bg, seed):
    if dark_bg:
        bg = _hsv(hue + 0.5, 0.5, 0.22)
        fill = _hsv(hue, 0.75, 0.95)
    else:
        bg = _hsv(hue + 0.5, 0.25, 0.92)
        fill = _hsv(hue, 0.85, 0.6)
    stroke_c = _hsv(hue + 0.25, 0.9, 0.35 if not dark_bg else 1.0)
    return StyleSpec(sid, (bg, fill, stroke_c), pattern, stroke, distortion, seed)


def default_styles():
    """8 pretrain styles and 3 held-out styles with disjoint parameters."""
    pretrain = [
        _style("s0", 0.00, "solid", 1, 0.0, False, 100),
        _style("s1", 0.125, "stripes", 2, 0.0, True, 101),
        _style("s2", 0.25, "noise-grain", 0, 0.2, False, 102),
        _style("s3", 0.375, "solid", 3, 0.4, True, 103),
        _style("s4", 0.50, "stripes", 1, 0.3, False, 104),
        _style("s5", 0.625, "noise-grain", 2, 0.0, True, 105),
        _style("s6", 0.75, "solid", 0, 0.5, False, 106),
        _style("s7", 0.875, "stripes", 3, 0.1, True, 107),
    ]
    heldout = [
        _style("h0", 0.0625, "stripes", 2, 0.5, False, 200),
        _style("h1", 0.5625, "noise-grain", 1, 0.0, True, 201),
        _style("h2", 0.3125, "solid", 2, 0.3, False, 202),
    ]
    return pretrain, heldout


# ------------------------------------------------------------------ rendering


def _jitter(subject, seed, size):
    rng = np.random.default_rng([seed, SUBJECTS.index(subject)])
    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    radius = rng.uniform(0.5, 0.6) * {None: 1.0, "small": 0.7, "large": 1.25}[size]
    angle = rng.uniform(-0.2, 0.2)
    return cx, cy, radius, angle


def _coords(n):
    # pixel centres in [-1, 1]
    g = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(g, g, indexing="xy")


def _warp(x, y, amount):
    if amount == 0.0:
        return x, y
    # exaggeration: horizontal stretch, vertical squash and a wobble
    u = x / (1.0 + amount) + 0.35 * amount * np.sin(np.pi * 1.5 * y)
    v = y * (1.0 + 0.6 * amount)
    return u, v


def _shape(subject, u, v, r):
    rho = np.hypot(u, v)
    th = np.arctan2(v, u)
    if subject == "circle":
        return rho <= r
    if subject == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.82 * r
    if subject == "triangle":
        # upward equilateral triangle inscribed in radius r (image y grows downward)
        a = v <= 0.5 * r
        b = np.sqrt(3.0) * u - v <= r
        c = -np.sqrt(3.0) * u - v <= r
        return a & b & c
    if subject == "star":
        lobes = (0.5 + 0.5 * np.cos(5 * (th + np.pi / 2))) ** 2
        return rho <= r * (0.42 + 0.62 * lobes)
    if subject == "cross":
        w = 0.32 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if subject == "ring":
        return (rho <= r) & (rho >= 0.55 * r)
    raise VocabularyError(subject, SUBJECTS)


def silhouette_mask(subject, seed, distortion=0.0, size=None, supersample=SUPERSAMPLE):
    """Boolean mask at ``IMAGE_SIZE * supersample`` resolution."""
    if subject not in SUBJECTS:
        raise VocabularyError(subject, SUBJECTS)
    cx, cy, r, ang = _jitter(subject, seed, size)
    x, y = _coords(IMAGE_SIZE * supersample)
    x, y = x - cx, y - cy
    c, s = np.cos(ang), np.sin(ang)
    x, y = c * x + s * y, -s * x + c * y
    u, v = _warp(x, y, distortion)
    return _shape(subject, u, v, r)


def _downsample(a, k):
    if k == 1:
        return a
    h, w = a.shape[:2]
    return a.reshape(h // k, k, w // k, k, *a.shape[2:]).mean(axis=(1, 3))


def _background(style, seed, n):
    bg = np.asarray(style.palette[0])
    img = np.broadcast_to(bg, (n, n, 3)).copy()
    if style.pattern == "stripes":
        x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        period = 6 * n / IMAGE_SIZE
        band = ((x + y) // (period / 2)) % 2 == 1
        img[band] = 0.55 * bg + 0.45 * np.asarray(style.palette[2])
    elif style.pattern == "noise-grain":
        rng = np.random.default_rng([seed, 7919])
        grain = rng.normal(0.0, 0.12, size=(IMAGE_SIZE, IMAGE_SIZE, 1))
        img += np.repeat(np.repeat(grain, n // IMAGE_SIZE, 0), n // IMAGE_SIZE, 1)
    return img


def render_sample(style, subject, seed, size=None):
    """Deterministic (3, 32, 32) float32 image in [-1, 1]."""
    if subject not in SUBJECTS:
        raise VocabularyError(subject, SUBJECTS)
    if size is not None and size not in MODIFIERS:
        raise VocabularyError(size, MODIFIERS)
    k = SUPERSAMPLE
    n = IMAGE_SIZE * k
    mask = silhouette_mask(subject, seed, style.distortion, size, k)
    img = _background(style, seed, n)
    img[mask] = style.palette[1]
    if style.stroke_width > 0:
        inner = ndimage.binary_erosion(mask, iterations=style.stroke_width * k, border_value=0)
        img[mask & ~inner] = style.palette[2]
    img = _downsample(img, k)
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def caption_tokens(subject, size=None):
    return [subject] + ([size] if size else [])


# -------------------------------------------------------------------- corpus


@dataclass
class CorpusEntry:
    path: str
    subject: str
    style_id: str
    seed: int
    split: str
    modifiers: list = field(default_factory=list)


@dataclass
class CorpusManifest:
    root: str
    styles: dict
    entries: list
    seed: int = 0
    version: int = 1

    def to_json(self):
        return {
            "version": self.version,
            "seed": self.seed,
            "styles": {k: v.to_dict() for k, v in sorted(self.styles.items())},
            "entries": [asdict(e) for e in self.entries],
        }

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def style_ids(self, split):
        return sorted({e.style_id for e in self.entries if e.split == split})

    def load_images(self, entries=None):
        entries = self.entries if entries is None else entries
        return np.stack([read_ppm(os.path.join(self.root, e.path)) for e in entries])

    @classmethod
    def load(cls, root):
        with open(os.path.join(root, "manifest.json")) as fh:
            d = json.load(fh)
        styles = {k: StyleSpec.from_dict(v) for k, v in d["styles"].items()}
        entries = [CorpusEntry(**e) for e in d["entries"]]
        return cls(root, styles, entries, d.get("seed", 0), d.get("version", 1))


def check_disjoint(pretrain, heldout):
    ids = {s.style_id for s in pretrain} & {s.style_id for s in heldout}
    params = {s.params_key() for s in pretrain} & {s.params_key() for s in heldout}
    if ids or params:
        raise ParameterError(f"held-out styles overlap pretrain styles: ids={sorted(ids)}")


def heldout_plan(style, count, seed):
    """(subject, size, seed) triples for a held-out style's reference set."""
    rng = np.random.default_rng([seed, int(style.seed)])
    subjects = [SUBJECTS[i] for i in rng.permutation(len(SUBJECTS))]
    return [(subjects[i % len(subjects)], None, int(seed * 1000 + style.seed * 10 + i)) for i in range(count)]


def generate_corpus(root, pretrain, heldout, per_cell=20, heldout_count=5, seed=0):
    """Render every cell to ``root`` as PPM files and write ``manifest.json``.

    Pretrain cells get ``per_cell`` images per (style, subject) with random
    size modifiers; each held-out style gets ``heldout_count`` references
    with distinct subjects where possible.
    """
    check_disjoint(pretrain, heldout)
    if len(heldout) < 1 or per_cell < 1 or heldout_count < 1:
        raise ParameterError("need at least one held-out style and positive counts")
    os.makedirs(root, exist_ok=True)
    entries = []
    rng = np.random.default_rng(seed)
    for style in pretrain:
        for subject in SUBJECTS:
            for i in range(per_cell):
                rseed = int(rng.integers(0, 2**31 - 1))
                size = [None, "small", "large"][int(rng.integers(0, 3))]
                entries.append(CorpusEntry(f"pretrain/{style.style_id}/{subject}_{i:03d}.ppm", subject,
                                           style.style_id, rseed, "pretrain", caption_tokens(subject, size)[1:]))
    for style in heldout:
        for i, (subject, size, rseed) in enumerate(heldout_plan(style, heldout_count, seed)):
            entries.append(CorpusEntry(f"heldout/{style.style_id}/{subject}_{i:03d}.ppm", subject,
                                       style.style_id, rseed, "heldout-style", []))
    paths = [e.path for e in entries]
    if len(set(paths)) != len(paths):
        raise OSError("corpus path collision")
    styles = {s.style_id: s for s in list(pretrain) + list(heldout)}
    for e in entries:
        full = os.path.join(root, e.path)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        size = e.modifiers[0] if e.modifiers else None
        write_ppm(full, render_sample(styles[e.style_id], e.subject, e.seed, size))
    manifest = CorpusManifest(root, styles, entries, seed)
    tmp = os.path.join(root, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(root, "manifest.json"))
    return manifest


class StyleSampler:
    """In-memory stream of (image, subject, size, style index) draws from the pretrain styles."""

    def __init__(self, styles, seed=0, size_probs=(0.5, 0.25, 0.25)):
        self.styles = list(styles)
        self.rng = np.random.default_rng(seed)
        self.size_probs = size_probs

    def batch(self, n):
        imgs, subjects, sizes, style_idx = [], [], [], []
        for _ in range(n):
            si = int(self.rng.integers(len(self.styles)))
            subj = SUBJECTS[int(self.rng.integers(len(SUBJECTS)))]
            size = [None, "small", "large"][int(self.rng.choice(3, p=self.size_probs))]
            rseed = int(self.rng.integers(0, 2**31 - 1))
            imgs.append(render_sample(self.styles[si], subj, rseed, size))
            subjects.append(subj)
            sizes.append(size)
            style_idx.append(si)
        return np.stack(imgs), subjects, sizes, np.asarray(style_idx)


def validate_image(image, shape=(3, IMAGE_SIZE, IMAGE_SIZE)):
    image = np.asarray(image)
    if image.shape != tuple(shape):
        raise InputError(f"expected image shape {tuple(shape)}, got {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < -1.0 - 1e-6 or image.max() > 1.0 + 1e-6:
        raise InputError("pixel values must be finite and in [-1, 1]")
    return image
