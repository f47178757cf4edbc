"""Per-layer contribution traces of the text and image branches, and the hierarchical scales built from them.

For every cross-attention layer d and sampler step t the probe records
P_t = cos(Z_t, Z) and P_i = cos(Z_i, Z), where Z = Z_t + Z_i is measured
with every layer's image scale forced to 1.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .conditioning import ConditionPair, average_embeddings, encode_image
from .data import MODIFIERS, SUBJECTS
from .diffusion import sample
from .errors import DimensionError, ParameterError, TraceIntegrityError
from .tensor import Tensor

log = logging.getLogger(__name__)

TRACE_MAGIC = b"STLTRACE"
TRACE_VERSION = 1
AVERAGED = "M"
NORMALIZATION = "minmax"


def _cos_rows(a, b):
    # row-wise cosine over all trailing axes, float64, zero for degenerate norms
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = (a * b).sum(axis=1)
    out = np.zeros(len(a))
    ok = (na > 1e-12) & (nb > 1e-12)
    out[ok] = dots[ok] / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


@dataclass
class ContributionTrace:
    """P_t and P_i, each (layers, timesteps). ``tag`` is a reference index or "M" for the averaged reference."""

    P_t: np.ndarray
    P_i: np.ndarray
    tag: int | str = AVERAGED
    prompt_id: str = ""

    def __post_init__(self):
        self.P_t = np.asarray(self.P_t, dtype=np.float64)
        self.P_i = np.asarray(self.P_i, dtype=np.float64)

    @property
    def layers(self):
        return self.P_t.shape[0]

    @property
    def timesteps(self):
        return self.P_t.shape[1]

    @property
    def averaged(self):
        return self.tag == AVERAGED

    def validate(self):
        if self.P_t.ndim != 2 or self.P_t.shape != self.P_i.shape:
            raise TraceIntegrityError(f"trace matrices have shapes {self.P_t.shape} and {self.P_i.shape}")
        for name, m in (("P_t", self.P_t), ("P_i", self.P_i)):
            if not np.all(np.isfinite(m)):
                raise TraceIntegrityError(f"{name} has unfilled or non-finite entries")
            if np.any(np.abs(m) > 1.0):
                raise TraceIntegrityError(f"{name} has entries outside [-1, 1]")
        return self

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "timestep", "P_t", "P_i"])
        for d in range(self.layers):
            for t in range(self.timesteps):
                w.writerow([d, t, f"{self.P_t[d, t]:.9g}", f"{self.P_i[d, t]:.9g}"])
        return buf.getvalue()

    def to_bytes(self):
        meta = {"version": TRACE_VERSION, "layers": self.layers, "timesteps": self.timesteps,
                "tag": self.tag, "prompt_id": self.prompt_id}
        # float32 container is lossy; keep the exact values in the metadata as well
        meta["exact"] = {"P_t": self.P_t.tolist(), "P_i": self.P_i.tolist()}
        return container.pack(TRACE_MAGIC, meta, [("P_t", self.P_t), ("P_i", self.P_i)])

    @classmethod
    def from_bytes(cls, raw):
        meta, arrays = container.unpack(raw, TRACE_MAGIC)
        if meta.get("version") != TRACE_VERSION:
            raise ParameterError(f"trace version {meta.get('version')} is not supported")
        exact = meta.get("exact", {})
        p_t = np.asarray(exact.get("P_t", arrays["P_t"]), dtype=np.float64).reshape(meta["layers"], meta["timesteps"])
        p_i = np.asarray(exact.get("P_i", arrays["P_i"]), dtype=np.float64).reshape(meta["layers"], meta["timesteps"])
        return cls(p_t, p_i, meta["tag"], meta["prompt_id"]).validate()

    def save(self, path):
        container.atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class HierarchicalScales:
    scales: np.ndarray
    degenerate: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)

    def __len__(self):
        return len(self.scales)

    def to_dict(self):
        return {"scales": self.scales.tolist(), "degenerate": bool(self.degenerate), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        out = cls(np.asarray(d["scales"], dtype=np.float64), bool(d.get("degenerate", False)), dict(d.get("provenance", {})))
        if np.any(out.scales < 0) or np.any(out.scales > 1):
            raise ParameterError("hierarchical scales must lie in [0, 1]")
        return out

    @classmethod
    def uniform(cls, layers, value=1.0):
        return cls(np.full(layers, float(value)), False, {"normalization": "uniform"})

    def save(self, path):
        container.atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def hash_arrays(arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.astype("<f4").tobytes())
    return h.hexdigest()


def hash_prompts(prompts):
    return hashlib.sha256(json.dumps([prompt_label(p) for p in prompts]).encode()).hexdigest()


def prompt_label(prompt):
    if isinstance(prompt, str):
        return prompt
    subject, mods = prompt
    return " ".join(list(mods) + [subject])


def default_probe_prompts(reference_subjects=(), count=8):
    """Subject prompts avoiding the reference subjects where the vocabulary allows it.

    Candidates are every (subject, modifier) combination, subjects not shown
    in the references first. Only when those run out are reference subjects used.
    """
    refs = set(reference_subjects)
    mods = [()] + [(m,) for m in MODIFIERS]
    fresh = [(s, m) for s in SUBJECTS if s not in refs for m in mods]
    seen = [(s, m) for s in SUBJECTS if s in refs for m in mods]
    # interleave modifiers so short lists still cover every subject
    fresh.sort(key=lambda p: mods.index(p[1]))
    seen.sort(key=lambda p: mods.index(p[1]))
    out = (fresh + seen)[:count]
    if len(out) < count:
        raise ParameterError(f"only {len(out)} distinct prompts exist, {count} requested")
    return out


def record_contributions_batch(denoiser, cond, sched, seeds, T_inf=50, tags=None, prompt_ids=None, dump=None):
    """Probe every row of a batched ConditionPair; returns one ContributionTrace per row.

    Image scales are forced to 1 for the run and restored afterwards, as are
    any previously installed hooks. The sampled images are discarded. If
    ``dump`` is a list, (step, layer, Z, Z_t, Z_i) arrays are appended to it.
    """
    if cond.image is None:
        raise ParameterError("probing needs an image condition")
    b = cond.batch
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    if len(seeds) != b:
        raise DimensionError(f"{len(seeds)} seeds for {b} condition rows")
    tags = list(tags) if tags is not None else [AVERAGED] * b
    prompt_ids = list(prompt_ids) if prompt_ids is not None else [""] * b
    layers = denoiser.cross_layers
    n_layers = len(layers)
    P_t = np.full((b, n_layers, T_inf), np.nan)
    P_i = np.full((b, n_layers, T_inf), np.nan)
    hits = np.zeros((n_layers, T_inf), dtype=np.int64)
    state = {"k": -1}

    def hook(d, z, z_t, z_i):
        k = state["k"]
        P_t[:, d, k] = _cos_rows(z_t, z)
        P_i[:, d, k] = _cos_rows(z_i, z)
        hits[d, k] += 1
        if dump is not None:
            dump.append((k, d, z.copy(), z_t.copy(), z_i.copy()))

    def step(k, t):
        state["k"] = k

    saved = [(layer.image_scale, layer.multiplier, layer.probe) for layer in layers]
    try:
        for layer in layers:
            layer.image_scale, layer.multiplier, layer.probe = 1.0, 1.0, hook
        sample(denoiser, cond, sched, seeds, steps=T_inf, mode="ddim", callback=step)
    finally:
        for layer, (s, m, p) in zip(layers, saved):
            layer.image_scale, layer.multiplier, layer.probe = s, m, p
    if not np.all(hits == 1):
        missing = np.argwhere(hits != 1)
        raise TraceIntegrityError(f"probe hooks fired irregularly at (layer, step) {missing[:5].tolist()}")
    return [ContributionTrace(P_t[r], P_i[r], tags[r], prompt_ids[r]).validate() for r in range(b)]


def record_contributions(denoiser, cond, sched, seed, T_inf=50, tag=AVERAGED, prompt_id="", dump=None):
    """Single-row probe run; ``cond`` holds one text row and one image row."""
    if cond.batch != 1:
        raise DimensionError("record_contributions takes a single condition row; use record_contributions_batch")
    return record_contributions_batch(denoiser, cond, sched, [seed], T_inf, [tag], [prompt_id], dump)[0]


def layer_difference(trace):
    """Per-layer mean over timesteps of P_i - P_t."""
    trace.validate()
    return (trace.P_i - trace.P_t).mean(axis=1)


def minmax_normalize(values):
    """Map onto [0, 1] by min-max; constant input gives all ones and ``degenerate=True``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) == 0:
        raise ParameterError("expected a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ParameterError("values must be finite")
    lo, hi = v.min(), v.max()
    if hi - lo <= 0.0:
        return np.ones_like(v), True
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0), False


def _check_traces(traces, what):
    if not traces:
        raise ParameterError(f"at least one {what} trace is required")
    for tr in traces:
        tr.validate()


def compute_hierarchical_scales(singles, multi, prompts_hash="", references_hash=""):
    """Scales = minmax(D^M - D^S), with D^S over every single-reference trace and D^M over the averaged ones."""
    _check_traces(singles, "single-reference")
    _check_traces(multi, "averaged-reference")
    shapes = {(tr.layers, tr.timesteps) for tr in list(singles) + list(multi)}
    if len(shapes) != 1:
        raise DimensionError(f"traces disagree on (layers, timesteps): {sorted(shapes)}")
    if any(tr.averaged for tr in singles) or not all(tr.averaged for tr in multi):
        raise ParameterError("single traces need integer tags and averaged traces the 'M' tag")
    d_s = np.mean([layer_difference(tr) for tr in singles], axis=0)
    d_m = np.mean([layer_difference(tr) for tr in multi], axis=0)
    diff = d_m - d_s
    scales, degenerate = minmax_normalize(diff)
    if degenerate:
        log.warning("layer differences are constant; falling back to unit scales")
    provenance = {
        "normalization": NORMALIZATION,
        "prompts": prompts_hash,
        "references": references_hash,
        "single_traces": len(singles),
        "averaged_traces": len(multi),
        "D_S": d_s.tolist(),
        "D_M": d_m.tolist(),
    }
    return HierarchicalScales(scales, degenerate, provenance)


@dataclass
class ProbeResult:
    singles: list
    multi: list
    scales: HierarchicalScales
    prompts: list


def probe_references(model, images, sched, prompts=None, seed=0, T_inf=50, subjects=(), batch=64):
    """Run the full probe on a BaseModel for N reference images.

    Every (reference, prompt) pair yields a single-reference trace and every
    prompt yields one trace with the averaged reference embedding.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ParameterError("probing needs at least one reference image")
    prompts = list(prompts) if prompts is not None else default_probe_prompts(subjects)
    embs = [encode_image(model.encoder, im) for im in images]
    avg = average_embeddings(embs)
    rows = []  # (prompt, image tokens, tag)
    for j, p in enumerate(prompts):
        for n, e in enumerate(embs):
            rows.append((p, e.data, n))
        rows.append((p, avg.data, AVERAGED))
    seeds = [seed * 100003 + (i // (len(embs) + 1)) for i in range(len(rows))]
    traces = []
    for start in range(0, len(rows), batch):
        chunk = rows[start : start + batch]
        text = model.text_condition([r[0] for r in chunk])
        image = Tensor(np.stack([r[1] for r in chunk]))
        traces += record_contributions_batch(
            model.denoiser, ConditionPair(text, image), sched, seeds[start : start + batch], T_inf,
            [r[2] for r in chunk], [prompt_label(r[0]) for r in chunk])
    singles = [tr for tr in traces if not tr.averaged]
    multi = [tr for tr in traces if tr.averaged]
    scales = compute_hierarchical_scales(singles, multi, hash_prompts(prompts), hash_arrays(images))
    scales.provenance["T_inf"] = int(T_inf)
    scales.provenance["seed"] = int(seed)
    return ProbeResult(singles, multi, scales, prompts)


def aggregate_traces(traces, tag=None, prompt_id="*"):
    """Elementwise mean of several traces (e.g. one reference over all probe prompts)."""
    if not traces:
        raise ParameterError("nothing to aggregate")
    shapes = {tr.P_t.shape for tr in traces}
    if len(shapes) != 1:
        raise DimensionError(f"traces disagree on shape: {sorted(shapes)}")
    tag = traces[0].tag if tag is None else tag
    return ContributionTrace(np.mean([tr.P_t for tr in traces], axis=0), np.mean([tr.P_i for tr in traces], axis=0),
                             tag, prompt_id).validate()
