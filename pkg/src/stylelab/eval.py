"""Style and content probes, and the image-scale multiplier sweep.

Both probes are frozen before any method is evaluated. The style probe is a
fixed descriptor (palette histogram, background texture spectrum and
silhouette geometry) with nearest-centroid classification; the content probe
is a small MLP over an estimated foreground map.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import pickle
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, stats

from .container import atomic_write_bytes, atomic_write_text
from .data import MAX_DISTORTION, MAX_STROKE, PATTERNS, SUBJECTS, StyleSpec, render_sample
from .errors import ParameterError, StateError

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(21))
_LEVELS = 4


def _unit(images):
    x = (np.asarray(images, dtype=np.float64) + 1.0) * 0.5
    return np.clip(x, 0.0, 1.0)


def _border(x):
    # x: (3, H, W) -> (n, 3) border pixels
    return np.concatenate([x[:, 0, :], x[:, -1, :], x[:, 1:-1, 0], x[:, 1:-1, -1]], axis=1).T


def foreground_map(image):
    """Per-pixel colour distance from the median border colour, (H, W) in [0, sqrt(3)]."""
    x = _unit(image)
    bg = np.median(_border(x), axis=0)
    return np.sqrt(((x - bg[:, None, None]) ** 2).sum(axis=0))


def _color_hist(x):
    # soft (linear-interpolated) histogram over a 4x4x4 RGB lattice
    v = x.reshape(3, -1).T * (_LEVELS - 1)
    lo = np.clip(np.floor(v).astype(int), 0, _LEVELS - 2)
    frac = v - lo
    hist = np.zeros((_LEVELS,) * 3)
    for dr in (0, 1):
        wr = frac[:, 0] if dr else 1 - frac[:, 0]
        for dg in (0, 1):
            wg = frac[:, 1] if dg else 1 - frac[:, 1]
            for db in (0, 1):
                wb = frac[:, 2] if db else 1 - frac[:, 2]
                np.add.at(hist, (lo[:, 0] + dr, lo[:, 1] + dg, lo[:, 2] + db), wr * wg * wb)
    return np.sqrt(hist.reshape(-1) / v.shape[0])


def _texture(x, fg):
    gray = x.mean(axis=0)
    bgmask = fg <= np.percentile(fg, 60)
    hp = gray - ndimage.uniform_filter(gray, 3, mode="reflect")
    grain = np.log(1e-5 + np.mean(hp[bgmask] ** 2))
    spec = np.abs(np.fft.fft2(gray - gray.mean())) ** 2
    n = gray.shape[0]
    fy, fx = np.meshgrid(np.fft.fftfreq(n), np.fft.fftfreq(n), indexing="ij")
    r = np.hypot(fx, fy)
    diag = np.abs(np.abs(fx) - np.abs(fy)) < 0.04
    total = spec.sum() + 1e-8
    feats = [grain]
    for lo, hi in ((0.05, 0.12), (0.12, 0.25), (0.25, 0.5), (0.5, 0.8)):
        band = (r >= lo) & (r < hi)
        feats.append(np.log(1e-6 + spec[band].sum() / total))
        feats.append(np.log(1e-6 + spec[band & diag].sum() / total))
    return np.array(feats)


def _geometry(fg):
    mask = fg > max(0.15, 0.5 * fg.max())
    if mask.sum() < 4:
        return np.zeros(3)
    ys, xs = np.nonzero(mask)
    sx, sy = xs.std() + 0.5, ys.std() + 0.5
    inner = ndimage.binary_erosion(mask, iterations=1)
    edge_ratio = (mask & ~inner).sum() / mask.sum()
    return np.array([np.log(sx / sy), edge_ratio, mask.mean()])


def style_descriptor(image):
    x = _unit(image)
    fg = foreground_map(image)
    return np.concatenate([_color_hist(x), _texture(x, fg), _geometry(fg)])


def style_descriptors(images):
    return np.stack([style_descriptor(im) for im in images])


_GROUPS = (slice(0, 64), slice(64, 73), slice(73, 76))
_GROUP_WEIGHTS = (1.0, 0.5, 0.5)


class StyleProbe:
    """Nearest style centroid in a fixed, standardized descriptor space."""

    def __init__(self):
        self.centroids = {}
        self._scale = None

    def fit(self, references):
        """``references`` maps style id -> (n, C, H, W) reference images."""
        if not references:
            raise ParameterError("need at least one style to fit centroids")
        feats = {sid: style_descriptors(imgs) for sid, imgs in references.items()}
        allf = np.concatenate(list(feats.values()))
        scale = allf.std(axis=0) + 1e-3
        w = np.ones(allf.shape[1])
        for g, gw in zip(_GROUPS, _GROUP_WEIGHTS):
            w[g] = gw / np.sqrt(g.stop - g.start)
        self._scale = scale / w
        self.centroids = {sid: (f / self._scale).mean(axis=0) for sid, f in feats.items()}
        return self

    def embed(self, images):
        if self._scale is None:
            raise StateError("style centroids have not been computed")
        return style_descriptors(images) / self._scale

    def predict(self, images):
        z = self.embed(images)
        ids = sorted(self.centroids)
        c = np.stack([self.centroids[i] for i in ids])
        d = ((z[:, None, :] - c[None]) ** 2).sum(axis=-1)
        return [ids[j] for j in d.argmin(axis=1)]


def style_score(images, target_style, probe):
    """Fraction of images whose nearest style centroid is ``target_style``."""
    if probe is None or not getattr(probe, "centroids", None):
        raise StateError("style centroids have not been computed")
    if len(images) == 0:
        raise ParameterError("style_score needs at least one image")
    if target_style not in probe.centroids:
        raise StateError(f"no centroid for style {target_style!r}")
    pred = probe.predict(images)
    return float(np.mean([p == target_style for p in pred]))


def subject_map(image):
    """Foreground map that tolerates two-colour (striped) borders.

    Border pixels far from the median border colour form a second background
    cluster when they make up a sizeable share of the border.
    """
    x = _unit(image)
    b = _border(x)
    med = np.median(b, axis=0)
    far = np.linalg.norm(b - med, axis=1) > 0.15
    centers = [med]
    if 0.25 < far.mean() < 0.75:
        centers = [np.median(b[~far], axis=0), np.median(b[far], axis=0)]
    d = np.min([np.sqrt(((x - c[:, None, None]) ** 2).sum(axis=0)) for c in centers], axis=0)
    return ndimage.median_filter(d, 3)


def _canonical(fg, out=24, span=2.6):
    # resample around the weighted centroid, scaled by the radius of gyration
    w = np.clip((fg / (fg.max() + 1e-6) - 0.25) / 0.5, 0.0, 1.0)
    m = w.sum() + 1e-9
    yy, xx = np.mgrid[: fg.shape[0], : fg.shape[1]]
    cy, cx = (w * yy).sum() / m, (w * xx).sum() / m
    r = np.sqrt((w * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum() / m) + 1e-3
    g = (np.arange(out) - (out - 1) / 2) * (2 * span * r / out)
    coords = np.stack(np.meshgrid(cy + g, cx + g, indexing="ij"))
    return ndimage.map_coordinates(w, coords, order=1, mode="constant")


def silhouette_features(images):
    fg = np.stack([subject_map(im) for im in images])
    canon = np.stack([_canonical(f) for f in fg])
    raw = fg / (fg.reshape(len(fg), -1).max(axis=1)[:, None, None] + 1e-6)
    return np.concatenate([canon.reshape(len(fg), -1), raw.reshape(len(fg), -1)], axis=1)


def random_style(rng, sid="rand"):
    pal = tuple(tuple(float(v) for v in rng.uniform(0, 1, 3).round(4)) for _ in range(3))
    return StyleSpec(sid, pal, PATTERNS[int(rng.integers(3))], int(rng.integers(0, MAX_STROKE + 1)),
                     float(rng.uniform(0, MAX_DISTORTION)), int(rng.integers(1 << 30)))


def _augment(img, rng):
    sigma = rng.uniform(0.0, 1.0)
    if sigma > 0.2:
        img = np.stack([ndimage.gaussian_filter(c, sigma) for c in img])
    img = img + rng.normal(0.0, rng.uniform(0.0, 0.12), img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


class ContentProbe:
    """Subject classifier over normalized foreground maps."""

    def __init__(self, model=None):
        self.model = model

    @classmethod
    def train(cls, styles, per_style=300, random_styles=40, per_random=60, seed=0):
        """Fit on augmented renders of ``styles`` plus random palettes for colour invariance."""
        from sklearn.neural_network import MLPClassifier

        rng = np.random.default_rng(seed)
        pool = [(s, per_style) for s in styles]
        pool += [(random_style(rng, f"r{i}"), per_random) for i in range(random_styles)]
        imgs, labels = [], []
        for style, count in pool:
            for _ in range(count):
                k = int(rng.integers(len(SUBJECTS)))
                size = [None, "small", "large"][int(rng.integers(3))]
                img = render_sample(style, SUBJECTS[k], int(rng.integers(1 << 30)), size)
                imgs.append(_augment(img, rng))
                labels.append(k)
        clf = MLPClassifier(hidden_layer_sizes=(256,), alpha=1e-3, max_iter=120, random_state=seed)
        clf.fit(silhouette_features(imgs), np.asarray(labels))
        return cls(clf)

    def predict(self, images):
        if self.model is None:
            raise StateError("content probe is not trained")
        return [SUBJECTS[i] for i in self.model.predict(silhouette_features(images))]

    def save(self, path):
        atomic_write_bytes(path, pickle.dumps(self.model))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls(pickle.load(fh))


def content_score(images, prompts, probe):
    """Fraction of images whose predicted subject matches the prompt subject."""
    if probe is None or probe.model is None:
        raise StateError("content probe is not trained")
    if len(images) == 0:
        raise ParameterError("content_score needs at least one image")
    subjects = [p if isinstance(p, str) else p[0] for p in prompts]
    if len(subjects) != len(images):
        raise ParameterError("one prompt per image is required")
    pred = probe.predict(images)
    return float(np.mean([a == b for a, b in zip(pred, subjects)]))


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    target_style: str
    multipliers: list = field(default_factory=list)
    style_accuracy: list = field(default_factory=list)
    content_accuracy: list = field(default_factory=list)
    samples: int = 0
    config_hash: str = ""
    seeds: list = field(default_factory=list)

    def spearman(self):
        if len(self.multipliers) < 2 or np.ptp(self.style_accuracy) == 0:
            return 0.0
        return float(stats.spearmanr(self.multipliers, self.style_accuracy).statistic)

    def to_json(self):
        d = asdict(self)
        d["spearman_style"] = self.spearman()
        return json.dumps(d, indent=1, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["multiplier", "style_accuracy", "content_accuracy"])
        for row in zip(self.multipliers, self.style_accuracy, self.content_accuracy):
            w.writerow([f"{row[0]:.2f}", f"{row[1]:.4f}", f"{row[2]:.4f}"])
        return buf.getvalue()

    def to_gnuplot(self):
        lines = ["# multiplier style_accuracy content_accuracy"]
        lines += [f"{m:.2f} {s:.4f} {c:.4f}" for m, s, c in zip(self.multipliers, self.style_accuracy, self.content_accuracy)]
        return "\n".join(lines) + "\n"

    def plot_ppm(self, size=128):
        """Raster of both curves (style red, content blue) on a white canvas, as PPM bytes."""
        img = np.full((size, size, 3), 255, dtype=np.uint8)
        img[size - 8, 8 : size - 4] = 0
        img[4 : size - 7, 8] = 0
        xs = np.asarray(self.multipliers, dtype=float)
        span = max(xs.max() - xs.min(), 1e-9) if len(xs) else 1.0

        def to_px(m, a):
            px = 8 + int(round((m - (xs.min() if len(xs) else 0)) / span * (size - 14)))
            py = size - 8 - int(round(a * (size - 14)))
            return px, py

        for values, color in ((self.style_accuracy, (220, 30, 30)), (self.content_accuracy, (30, 30, 220))):
            pts = [to_px(m, a) for m, a in zip(xs, values)]
            for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[-1:]):
                n = max(abs(x1 - x0), abs(y1 - y0), 1)
                for k in range(n + 1):
                    x = x0 + (x1 - x0) * k // n
                    y = y0 + (y1 - y0) * k // n
                    img[max(0, y - 1) : y + 1, max(0, x - 1) : x + 1] = color
        return f"P6\n{size} {size}\n255\n".encode() + img.tobytes()

    def write(self, directory, stem="sweep"):
        import os

        atomic_write_text(os.path.join(directory, f"{stem}.json"), self.to_json())
        atomic_write_text(os.path.join(directory, f"{stem}.csv"), self.to_csv())
        atomic_write_text(os.path.join(directory, f"{stem}.dat"), self.to_gnuplot())
        atomic_write_bytes(os.path.join(directory, f"{stem}.ppm"), self.plot_ppm())


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def multiplier_sweep(generate, prompts, seeds, target_style, style_probe, content_probe, grid=DEFAULT_GRID,
                     config=None):
    """Evaluate style/content accuracy at each multiplier.

    ``generate(multiplier, prompts, seeds)`` returns one image per prompt.
    """
    grid = [float(g) for g in grid]
    if any(g < 0 or g > 1 for g in grid):
        raise ParameterError("multiplier grid must lie in [0, 1]")
    report = EvalReport(target_style, samples=len(prompts), seeds=[int(s) for s in seeds],
                        config_hash=config_hash(config or {}))
    for m in grid:
        images = generate(m, prompts, seeds)
        report.multipliers.append(m)
        report.style_accuracy.append(style_score(images, target_style, style_probe))
        report.content_accuracy.append(content_score(images, prompts, content_probe))
    return report


def style_renders(style, count, seed=0):
    """Clean renders of one style cycling through subjects and sizes."""
    rng = np.random.default_rng([seed, int(style.seed), 77])
    sizes = [None, "small", "large"]
    return np.stack([render_sample(style, SUBJECTS[i % len(SUBJECTS)], int(rng.integers(1 << 30)), sizes[i % 3])
                     for i in range(count)])


def fit_style_probe(styles, per_style=60, seed=0):
    """Centroids from fresh renders of every known style."""
    return StyleProbe().fit({s.style_id: style_renders(s, per_style, seed) for s in styles})
