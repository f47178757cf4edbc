"""Low-rank adapters on the attention projections, the style fine-tuning loop and style checkpoints."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .conditioning import ConditionPair, ImageEmbedding, average_embeddings, encode_image
from .diffusion import denoise_loss, make_batch, make_schedule
from .errors import ContractError, IncompatibilityError, NumericError, ParameterError
from .model import set_layer_scales
from .nn import Adam, Linear, Module, grad_norm, parameter_hash
from .probe import HierarchicalScales

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADAPTR01"
CHECKPOINT_VERSION = 1
SELF_TARGETS = ("q", "k", "v", "out")
CROSS_TARGETS = ("q", "k", "v", "ik", "iv", "out")


class LoRAPair:
    """A (rank, in) and B (out, rank); the delta on an (in, out) weight is scaling * A^T B^T."""

    def __init__(self, A, B, scaling):
        self.A = A
        self.B = B
        self.scaling = float(scaling)

    def delta(self):
        return self.scaling * (self.A.data.T @ self.B.data.T)


def named_linears(module, prefix=""):
    """Yield (dotted name, Linear) for every Linear reachable through public attributes."""
    for name, value in vars(module).items():
        if name.startswith("_"):
            continue
        path = f"{prefix}{name}"
        if isinstance(value, Linear):
            yield path, value
        elif isinstance(value, Module):
            yield from named_linears(value, path + ".")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    if isinstance(item, Linear):
                        yield f"{path}.{i}", item
                    else:
                        yield from named_linears(item, f"{path}.{i}.")


def attention_targets(denoiser):
    """Names of every attention projection: self-attention q/k/v/out and both cross-attention branches."""
    names = []
    for name, _ in named_linears(denoiser):
        parts = name.split(".")
        if len(parts) >= 2 and (
            (parts[-2] == "attn" and parts[-1] in SELF_TARGETS) or (parts[-2] == "cross" and parts[-1] in CROSS_TARGETS)
        ):
            names.append(name)
    return names


@dataclass
class LoRAAdapter:
    rank: int
    alpha: float
    pairs: dict  # target name -> LoRAPair
    seed: int = 0

    @property
    def targets(self):
        return list(self.pairs)

    @property
    def scaling(self):
        return self.alpha / self.rank

    def parameters(self):
        out = []
        for pair in self.pairs.values():
            out += [pair.A, pair.B]
        return out

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def attach(self, denoiser):
        lookup = dict(named_linears(denoiser))
        missing = [t for t in self.pairs if t not in lookup]
        if missing:
            raise IncompatibilityError(f"adapter targets missing from the model: {missing[:3]}")
        for name, pair in self.pairs.items():
            lin = lookup[name]
            if pair.A.shape[1] != lin.weight.shape[0] or pair.B.shape[0] != lin.weight.shape[1]:
                raise IncompatibilityError(f"adapter shapes do not fit {name}")
            lin._lora = pair
        return self

    def detach(self, denoiser):
        for name, lin in named_linears(denoiser):
            if name in self.pairs:
                lin._lora = None
        return self

    def zero_(self):
        for pair in self.pairs.values():
            pair.B.data = np.zeros_like(pair.B.data)
        return self

    def arrays(self):
        out = []
        for name, pair in self.pairs.items():
            out += [(f"{name}.A", pair.A.data), (f"{name}.B", pair.B.data)]
        return out

    @classmethod
    def from_arrays(cls, rank, alpha, targets, arrays, seed=0):
        scaling = alpha / rank
        pairs = {}
        for name in targets:
            a, b = arrays[f"{name}.A"], arrays[f"{name}.B"]
            if a.shape[0] != rank or b.shape[1] != rank:
                raise IncompatibilityError(f"stored adapter for {name} does not have rank {rank}")
            pairs[name] = LoRAPair(T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True), scaling)
        return cls(rank, alpha, pairs, seed)


def init_lora(denoiser, rank=4, seed=0, alpha=None, targets=None, attach=True):
    """A ~ N(0, 1/in), B = 0 so the attached model is unchanged until trained."""
    if int(rank) != rank or rank < 1:
        raise ParameterError(f"rank must be a positive integer, got {rank}")
    rank = int(rank)
    alpha = float(rank if alpha is None else alpha)
    lookup = dict(named_linears(denoiser))
    targets = list(targets) if targets is not None else attention_targets(denoiser)
    rng = np.random.default_rng([seed, 4242])
    dtype = T.get_dtype()
    pairs = {}
    for name in targets:
        if name not in lookup:
            raise ParameterError(f"unknown LoRA target {name!r}")
        fan_in, fan_out = lookup[name].weight.shape
        if rank > min(fan_in, fan_out):
            raise ParameterError(f"rank {rank} exceeds min(in, out) = {min(fan_in, fan_out)} for {name}")
        a = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(rank, fan_in)).astype(dtype)
        b = np.zeros((fan_out, rank), dtype=dtype)
        pairs[name] = LoRAPair(T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True), alpha / rank)
    adapter = LoRAAdapter(rank, alpha, pairs, seed)
    if attach:
        adapter.attach(denoiser)
    return adapter


def _caption(c):
    return (c, ()) if isinstance(c, str) else (c[0], tuple(c[1]))


def reference_embedding(model, images):
    """Averaged image embedding of the reference images under the frozen encoder."""
    return average_embeddings([encode_image(model.encoder, im) for im in images])


def finetune(model, adapter, refs, scales, steps=None, lr=1e-3, seed=0, batch=8, log_csv=None, sched=None,
             embedding=None):
    """Train the adapter on (image, caption) references; the base model stays frozen.

    The image condition is the averaged embedding of all references and does
    not change during the run. ``scales`` are installed with multiplier 1
    beforehand. Default budget is 100 steps per reference image. Returns the
    log as a list of (step, loss, grad_norm).
    """
    refs = list(refs)
    if not refs:
        raise ParameterError("fine-tuning needs at least one reference")
    steps = 100 * len(refs) if steps is None else int(steps)
    if steps < 0:
        raise ParameterError("steps must be non-negative")
    images = np.stack([np.asarray(im, dtype=np.float32) for im, _ in refs])
    captions = [_caption(c) for _, c in refs]
    den = model.denoiser
    set_layer_scales(den, getattr(scales, "scales", scales), 1.0)
    history = []
    if steps == 0:
        _write_log(log_csv, history)
        return history
    sched = sched or make_schedule(1000)
    emb = embedding if embedding is not None else reference_embedding(model, images)
    rng = np.random.default_rng([seed, 8])
    text_all = model.text_condition(captions).data
    flags = [(p, p.requires_grad) for p in model.parameters()]
    before = parameter_hash(model)
    params = adapter.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=lr)
    try:
        model.requires_grad_(False)
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(refs), size=batch)
            cond = ConditionPair(T.Tensor(text_all[idx]), T.Tensor(np.broadcast_to(emb.data, (batch,) + emb.data.shape).copy()))
            loss = denoise_loss(den, make_batch(images[idx], sched, rng), cond)
            lv = loss.item()
            if not np.isfinite(lv):
                norms = {n: float(np.abs(p.B.data).max()) for n, p in list(adapter.pairs.items())[:4]}
                raise NumericError(f"non-finite loss {lv} at fine-tune step {step}; |B| max {norms}")
            T.backward(loss)
            gn = grad_norm(params)
            opt.step()
            opt.zero_grad()
            history.append((step, lv, gn))
    finally:
        for p, flag in flags:
            p.requires_grad = flag
    if parameter_hash(model) != before:
        raise ContractError("base model parameters changed during fine-tuning")
    _write_log(log_csv, history)
    return history


def log_to_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "grad_norm"])
    for step, loss, gn in history:
        w.writerow([step, f"{loss:.9g}", f"{gn:.9g}"])
    return buf.getvalue()


def _write_log(path, history):
    if path is not None:
        container.atomic_write_text(path, log_to_csv(history))


@dataclass
class StyleCheckpoint:
    base_hash: str
    scales: HierarchicalScales
    adapter: LoRAAdapter
    embedding: ImageEmbedding
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def apply(self, model, multiplier=1.0):
        """Attach the adapter and install scales on a BaseModel with the matching hash."""
        if model.digest() != self.base_hash:
            raise IncompatibilityError("checkpoint was trained on a different base model")
        self.adapter.attach(model.denoiser)
        set_layer_scales(model.denoiser, self.scales.scales, multiplier)
        return self


def save_checkpoint(ckpt, path):
    meta = {
        "version": ckpt.version,
        "base_hash": ckpt.base_hash,
        "scales": ckpt.scales.to_dict(),
        "rank": ckpt.adapter.rank,
        "alpha": ckpt.adapter.alpha,
        "adapter_seed": ckpt.adapter.seed,
        "targets": ckpt.adapter.targets,
        "embedding": {"source": ckpt.embedding.source, "count": ckpt.embedding.count},
        "meta": ckpt.meta,
    }
    arrays = ckpt.adapter.arrays() + [("embedding", ckpt.embedding.data)]
    container.save(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path, base_hash=None):
    meta, arrays = container.load(path, CHECKPOINT_MAGIC)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IncompatibilityError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    if base_hash is not None and meta["base_hash"] != base_hash:
        raise IncompatibilityError("checkpoint base-model hash does not match the loaded model")
    adapter = LoRAAdapter.from_arrays(meta["rank"], meta["alpha"], meta["targets"], arrays, meta.get("adapter_seed", 0))
    emb = ImageEmbedding(T.Tensor(arrays["embedding"]), meta["embedding"]["source"], meta["embedding"]["count"])
    return StyleCheckpoint(meta["base_hash"], HierarchicalScales.from_dict(meta["scales"]), adapter, emb,
                           meta.get("meta", {}), meta["version"])
