"""Base model bundle (denoiser + text embedder + image encoder) and joint pretraining."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from . import tensor as T
from .conditioning import ConditionPair, ImageEncoder, TextEmbedder, Vocabulary, token_ids
from .diffusion import denoise_loss, make_batch, make_schedule
from .errors import IncompatibilityError, NumericError, ParameterError
from .model import DenoiserConfig, build_denoiser
from .nn import Adam, Module, grad_norm, parameter_hash

log = logging.getLogger(__name__)

MODEL_MAGIC = b"STLMODL1"
MODEL_VERSION = 1


class BaseModel(Module):
    def __init__(self, cfg, vocab, seed):
        cfg.validate()
        if len(vocab) != cfg.vocab_size:
            raise ParameterError(f"vocabulary has {len(vocab)} tokens, config expects {cfg.vocab_size}")
        rng = np.random.default_rng([seed, 17])
        self.denoiser = build_denoiser(cfg, seed)
        self.text = TextEmbedder(rng, cfg.vocab_size, cfg.text_width, cfg.text_tokens)
        self.encoder = ImageEncoder(rng, cfg.encoder_width, cfg.image_width, cfg.image_tokens,
                                    cfg.patch_size, cfg.channels, cfg.image_size)
        self._vocab = vocab
        self._cfg = cfg
        self._seed = seed

    @property
    def config(self):
        return self._cfg

    @property
    def vocab(self):
        return self._vocab

    def digest(self):
        return parameter_hash(self)

    def prompt_ids(self, prompts):
        """``prompts`` are (subject, modifiers) pairs or bare subject strings."""
        rows = []
        for p in prompts:
            subject, mods = (p, ()) if isinstance(p, str) else (p[0], tuple(p[1]))
            rows.append(token_ids(self._vocab, subject, mods, self._cfg.text_tokens))
        return np.stack(rows)

    def text_condition(self, prompts):
        with T.no_grad():
            return T.Tensor(self.text(self.prompt_ids(prompts)).data)

    def condition(self, prompts, image_tokens=None):
        """Frozen ConditionPair; ``image_tokens`` is (Li, Wi) shared by all rows or (B, Li, Wi)."""
        text = self.text_condition(prompts)
        image = None
        if image_tokens is not None:
            arr = np.asarray(getattr(image_tokens, "data", image_tokens), dtype=np.float32)
            if arr.ndim == 2:
                arr = np.broadcast_to(arr, (text.shape[0],) + arr.shape).copy()
            image = T.Tensor(arr)
        return ConditionPair(text, image)


def build_base_model(cfg=None, seed=0, vocab=None):
    vocab = vocab or Vocabulary.default()
    cfg = cfg or DenoiserConfig(vocab_size=len(vocab))
    return BaseModel(cfg, vocab, seed)


def save_base_model(model, path, meta=None):
    arrays = list(model.state_dict().items())
    info = {
        "version": MODEL_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "seed": model._seed,
        "hash": model.digest(),
        "meta": meta or {},
    }
    container.save(path, MODEL_MAGIC, info, arrays)


def load_base_model(path):
    meta, arrays = container.load(path, MODEL_MAGIC)
    if meta.get("version") != MODEL_VERSION:
        raise IncompatibilityError(f"model file version {meta.get('version')} != {MODEL_VERSION}")
    model = BaseModel(DenoiserConfig(**meta["config"]), Vocabulary(meta["vocab"]), meta["seed"])
    model.load_state_dict(arrays)
    if model.digest() != meta["hash"]:
        raise IncompatibilityError("model parameters do not match the stored hash")
    return model, meta.get("meta", {})


@dataclass
class PretrainConfig:
    steps: int = 12000
    batch: int = 32
    lr: float = 2e-3
    warmup: int = 300
    ema: float = 0.999
    text_dropout: float = 0.1
    image_dropout: float = 0.1
    same_image: float = 0.5
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    log_every: int = 250

    def to_dict(self):
        return asdict(self)


def _reference_index(rng, i, style_idx, by_style, same_image):
    if rng.random() < same_image:
        return i
    pool = by_style[style_idx[i]]
    return int(pool[rng.integers(len(pool))])


def pretrain(model, images, prompts, style_idx, cfg, callback=None):
    """Jointly train denoiser, text embedder and image encoder on a labelled corpus.

    ``images`` (N, C, H, W) in [-1, 1]; ``prompts`` per image as (subject,
    modifiers); ``style_idx`` per image. Each sample is conditioned on its
    caption and on the embedding of itself (probability ``same_image``) or
    of another image of the same style. Each branch is independently zeroed
    with its dropout probability. Weights are replaced by their EMA at the end.
    Returns the per-step log as a list of (step, loss, grad_norm).
    """
    images = np.asarray(images, dtype=np.float32)
    style_idx = np.asarray(style_idx)
    n = len(images)
    ids_all = model.prompt_ids(prompts)
    by_style = {s: np.flatnonzero(style_idx == s) for s in np.unique(style_idx)}
    rng = np.random.default_rng(cfg.seed)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, lr=cfg.lr)
    shadow = [p.data.copy() for p in params]
    history = []
    cm = model.config
    start = time.time()
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=cfg.batch)
        ref = np.array([_reference_index(rng, i, style_idx, by_style, cfg.same_image) for i in idx])
        keep_t = (rng.random(cfg.batch) >= cfg.text_dropout).astype(np.float32)
        keep_i = (rng.random(cfg.batch) >= cfg.image_dropout).astype(np.float32)
        c_t = model.text(ids_all[idx])
        c_t = T.mul(c_t, T.Tensor(np.broadcast_to(keep_t[:, None, None], c_t.shape)))
        c_i = model.encoder(images[ref])
        c_i = T.mul(c_i, T.Tensor(np.broadcast_to(keep_i[:, None, None], c_i.shape)))
        batch = make_batch(images[idx], sched, rng)
        loss = denoise_loss(model.denoiser, batch, ConditionPair(c_t, c_i))
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(f"non-finite loss {lv} at step {step}")
        T.backward(loss)
        gn = grad_norm(params)
        lr = cfg.lr * min(1.0, step / max(1, cfg.warmup))
        opt.step(lr)
        opt.zero_grad()
        decay = min(cfg.ema, (1 + step) / (10 + step))
        for s, p in zip(shadow, params):
            s *= decay
            s += (1 - decay) * p.data
        history.append((step, lv, gn))
        if callback is not None:
            callback(step, lv, gn)
        if cfg.log_every and step % cfg.log_every == 0:
            recent = np.mean([h[1] for h in history[-cfg.log_every:]])
            log.info("pretrain step %d loss %.4f (%.1fs)", step, recent, time.time() - start)
    for s, p in zip(shadow, params):
        p.data = s.astype(p.data.dtype)
    return history


def corpus_arrays(manifest, split="pretrain"):
    """Images, prompts, style indices and style id list for one manifest split."""
    entries = manifest.split(split)
    style_ids = manifest.style_ids(split)
    lookup = {s: i for i, s in enumerate(style_ids)}
    images = manifest.load_images(entries)
    prompts = [(e.subject, tuple(e.modifiers)) for e in entries]
    return images, prompts, np.array([lookup[e.style_id] for e in entries]), style_ids
