"""Conditional generation on a BaseModel, shared by the CLI and the evaluation runs."""

from __future__ import annotations

import numpy as np

from .conditioning import ConditionPair
from .diffusion import make_schedule, sample
from .errors import ParameterError
from .model import effective_scales, set_layer_scales
from .tensor import Tensor


def generate(model, prompts, seeds, image_tokens=None, sched=None, steps=50, mode="ddim", batch=50):
    """Sample one image per (prompt, seed); ``image_tokens`` (Li, Wi) is shared by every row.

    Without ``image_tokens`` the image branch is absent (text-only path).
    Each row depends only on its own seed, so batching does not change results.
    """
    prompts = list(prompts)
    seeds = [int(s) for s in seeds]
    if len(prompts) != len(seeds):
        raise ParameterError(f"{len(prompts)} prompts for {len(seeds)} seeds")
    sched = sched or make_schedule(1000)
    out = []
    for i in range(0, len(prompts), batch):
        cond = model.condition(prompts[i : i + batch], image_tokens)
        out.append(sample(model.denoiser, cond, sched, seeds[i : i + batch], steps=steps, mode=mode))
    return np.concatenate(out, axis=0)


class scaled:
    """Context manager installing per-layer scales and a multiplier, restoring the previous ones on exit."""

    def __init__(self, model, scales=None, multiplier=1.0):
        self.den = getattr(model, "denoiser", model)
        n = len(self.den.cross_layers)
        self.scales = np.ones(n) if scales is None else np.asarray(getattr(scales, "scales", scales), dtype=np.float64)
        self.multiplier = multiplier

    def __enter__(self):
        self.saved = [(l.image_scale, l.multiplier) for l in self.den.cross_layers]
        set_layer_scales(self.den, self.scales, self.multiplier)
        return self

    def __exit__(self, *exc):
        for layer, (s, m) in zip(self.den.cross_layers, self.saved):
            layer.image_scale, layer.multiplier = s, m
        return False


def text_only_condition(model, prompts):
    return ConditionPair(model.text_condition(prompts), None)


__all__ = ["generate", "scaled", "text_only_condition", "effective_scales", "Tensor"]
