"""Run configuration: one TOML document with a table per pipeline stage."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .errors import ParameterError
from .eval import DEFAULT_GRID
from .model import DenoiserConfig
from .pretrain import PretrainConfig


@dataclass
class CorpusConfig:
    per_cell: int = 20
    heldout_count: int = 5
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    sampler: str = "ddim"


@dataclass
class PretrainSection:
    steps: int = 12000
    batch: int = 32
    lr: float = 2e-3
    warmup: int = 300
    ema: float = 0.999
    text_dropout: float = 0.1
    image_dropout: float = 0.1
    same_image: float = 0.5
    seed: int = 0
    log_every: int = 250


@dataclass
class ProbeConfig:
    prompts: list = field(default_factory=list)  # empty -> subjects not shown in the references
    T_inf: int = 50
    count: int = 8
    seed: int = 0


@dataclass
class FinetuneConfig:
    rank: int = 4
    alpha: float = 4.0
    lr: float = 1e-3
    steps_per_image: int = 100
    batch: int = 8
    seed: int = 0


@dataclass
class EvalConfig:
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    samples: int = 50
    seed_base: int = 10_000
    style: str = "h0"
    probe_seed: int = 0
    style_renders: int = 60  # per style, for the style centroids
    content_per_style: int = 300
    content_random_styles: int = 40


@dataclass
class PathsConfig:
    runs: str = "runs"


SECTIONS = {
    "paths": PathsConfig,
    "corpus": CorpusConfig,
    "model": DenoiserConfig,
    "schedule": ScheduleConfig,
    "pretrain": PretrainSection,
    "probe": ProbeConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def pretrain_config(self):
        s = self.schedule
        return PretrainConfig(T=s.T, beta_start=s.beta_start, beta_end=s.beta_end, **asdict(self.pretrain))

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            table = doc.get(name, {})
            if not isinstance(table, dict):
                raise ParameterError(f"[{name}] must be a table")
            allowed = {f.name for f in fields(klass)}
            bad = set(table) - allowed
            if bad:
                raise ParameterError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**table)
        out = cls(**kwargs)
        out.model.validate()
        return out


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParameterError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(doc)
