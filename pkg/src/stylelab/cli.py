"""Command line entry point: corpus generation, pretraining, probing, sampling, fine-tuning and sweeps.

Exit codes: 0 success, 2 bad usage, 3 missing or incompatible prerequisite,
4 numeric failure, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from . import container
from .config import RunConfig, load_config
from .errors import (
    DimensionError,
    FormatError,
    IncompatibilityError,
    InputError,
    NumericError,
    ParameterError,
    StateError,
    VocabularyError,
)

log = logging.getLogger("stylelab")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class MissingArtifact(Exception):
    pass


class LockedError(OSError):
    pass


def require(path, what):
    if path is None:
        raise ParameterError(f"--{what} is required")
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found: {path}")
    return path


class RunLock:
    """Exclusive lock file inside an artifact directory."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"artifact directory is locked by another run: {self.path}") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        with contextlib.suppress(FileNotFoundError):
            os.unlink(self.path)
        return False


def thread_limit():
    """Honour STYLELAB_THREADS for BLAS/OpenMP pools."""
    raw = os.environ.get("STYLELAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"STYLELAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ParameterError("STYLELAB_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def parse_prompt(text):
    """'small circle' -> ('circle', ('small',))."""
    words = text.split()
    if not words:
        raise ParameterError("empty prompt")
    return words[-1], tuple(words[:-1])


def split_paths(value):
    return [p for p in (value or "").split(",") if p]


def run_dir(cfg, args, extra):
    if args.out:
        return args.out
    key = json.dumps({"cmd": args.command, "config": cfg.to_dict(), "args": extra}, sort_keys=True)
    import hashlib

    return os.path.join(cfg.paths.runs, f"{args.command}-{hashlib.sha256(key.encode()).hexdigest()[:12]}")


def write_resolved(directory, cfg, extra):
    container.atomic_write_text(os.path.join(directory, "config.toml"), cfg.to_toml())
    container.atomic_write_text(os.path.join(directory, "invocation.json"),
                                json.dumps(extra, indent=1, sort_keys=True) + "\n")


def _schedule(cfg):
    from .diffusion import make_schedule

    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def _load_refs(paths):
    from .imageops import read_ppm

    if not paths:
        raise ParameterError("--refs needs at least one image path")
    return np.stack([read_ppm(require(p, "refs")) for p in paths])


def _manifest_subjects(paths):
    """Look reference captions up in a corpus manifest above each file, if any."""
    out = []
    for p in paths:
        found = None
        d = os.path.dirname(os.path.abspath(p))
        while True:
            m = os.path.join(d, "manifest.json")
            if os.path.exists(m):
                with open(m) as fh:
                    entries = json.load(fh)["entries"]
                rel = os.path.relpath(os.path.abspath(p), d)
                for e in entries:
                    if e["path"] == rel:
                        found = (e["subject"], tuple(e["modifiers"]))
                break
            parent = os.path.dirname(d)
            if parent == d:
                break
            d = parent
        out.append(found)
    return out


def _captions(args, paths):
    if args.captions:
        caps = [parse_prompt(c) for c in args.captions.split(",")]
        if len(caps) != len(paths):
            raise ParameterError(f"{len(caps)} captions for {len(paths)} references")
        return caps
    caps = _manifest_subjects(paths)
    if any(c is None for c in caps):
        raise ParameterError("reference captions not found in a corpus manifest; pass --captions")
    return caps


def _load_model(path):
    from .pretrain import load_base_model

    model, _ = load_base_model(require(path, "model"))
    return model


def _seed(args, default):
    return default if args.seed is None else int(args.seed)


# ------------------------------------------------------------------- commands


def cmd_gen_corpus(args, cfg):
    from .data import default_styles, generate_corpus

    cfg.corpus.seed = _seed(args, cfg.corpus.seed)
    out = run_dir(cfg, args, {})
    with RunLock(out):
        pre, held = default_styles()
        m = generate_corpus(out, pre, held, cfg.corpus.per_cell, cfg.corpus.heldout_count, cfg.corpus.seed)
        write_resolved(out, cfg, {})
    print(f"{len(m.entries)} images written to {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    from .data import CorpusManifest
    from .pretrain import build_base_model, corpus_arrays, pretrain, save_base_model

    corpus = require(args.corpus, "corpus")
    require(os.path.join(corpus, "manifest.json"), "corpus manifest")
    if args.steps is not None:
        cfg.pretrain.steps = int(args.steps)
    cfg.pretrain.seed = _seed(args, cfg.pretrain.seed)
    extra = {"corpus": os.path.abspath(corpus)}
    out = run_dir(cfg, args, extra)
    with RunLock(out):
        manifest = CorpusManifest.load(corpus)
        images, prompts, style_idx, _ = corpus_arrays(manifest)
        model = build_base_model(cfg.model, seed=cfg.pretrain.seed)
        history = pretrain(model, images, prompts, style_idx, cfg.pretrain_config())
        from .lora import log_to_csv

        container.atomic_write_text(os.path.join(out, "train_log.csv"), log_to_csv(history))
        save_base_model(model, os.path.join(out, "base.stl"), {"steps": cfg.pretrain.steps, "corpus": manifest.digest()})
        write_resolved(out, cfg, extra)
    print(os.path.join(out, "base.stl"))
    return EXIT_OK


def cmd_probe(args, cfg):
    from .probe import aggregate_traces, default_probe_prompts, probe_references

    model = _load_model(args.model)
    paths = split_paths(args.refs)
    refs = _load_refs(paths)
    cfg.probe.seed = _seed(args, cfg.probe.seed)
    subjects = [c[0] for c in _manifest_subjects(paths) if c is not None]
    prompts = [parse_prompt(p) for p in cfg.probe.prompts] or default_probe_prompts(subjects, cfg.probe.count)
    extra = {"model": os.path.abspath(args.model), "refs": [os.path.abspath(p) for p in paths]}
    out = run_dir(cfg, args, extra)
    with RunLock(out):
        res = probe_references(model, refs, _schedule(cfg), prompts, cfg.probe.seed, cfg.probe.T_inf)
        for n in range(len(refs)):
            tr = aggregate_traces([t for t in res.singles if t.tag == n], n)
            tr.save(os.path.join(out, f"trace_ref{n}.trace"))
            container.atomic_write_text(os.path.join(out, f"trace_ref{n}.csv"), tr.to_csv())
        avg = aggregate_traces(res.multi, "M")
        avg.save(os.path.join(out, "trace_avg.trace"))
        container.atomic_write_text(os.path.join(out, "trace_avg.csv"), avg.to_csv())
        res.scales.save(os.path.join(out, "scales.json"))
        write_resolved(out, cfg, extra)
    print(" ".join(f"{s:.3f}" for s in res.scales.scales) + (" (degenerate)" if res.scales.degenerate else ""))
    return EXIT_OK


def _image_condition(args, model):
    """(image tokens or None, scales or None) from --checkpoint / --refs / --scales."""
    from .lora import load_checkpoint, reference_embedding
    from .probe import HierarchicalScales

    if args.checkpoint:
        ckpt = load_checkpoint(require(args.checkpoint, "checkpoint"), model.digest())
        ckpt.adapter.attach(model.denoiser)
        return ckpt.embedding.data, ckpt.scales.scales
    scales = HierarchicalScales.load(require(args.scales, "scales")).scales if args.scales else None
    if args.refs:
        return reference_embedding(model, _load_refs(split_paths(args.refs))).data, scales
    return None, scales


def cmd_sample(args, cfg):
    from .imageops import ppm_bytes
    from .pipeline import generate, scaled

    model = _load_model(args.model)
    prompt = parse_prompt(args.prompt)
    tokens, scales = (None, None) if args.text_only else _image_condition(args, model)
    seed = _seed(args, 0)
    seeds = [seed + i for i in range(args.count)]
    extra = {"model": os.path.abspath(args.model), "prompt": args.prompt, "count": args.count, "seed": seed,
             "multiplier": args.multiplier, "text_only": args.text_only, "refs": args.refs,
             "checkpoint": args.checkpoint, "scales": args.scales}
    out = run_dir(cfg, args, extra)
    with RunLock(out):
        with scaled(model, scales, args.multiplier):
            images = generate(model, [prompt] * args.count, seeds, tokens, _schedule(cfg),
                              cfg.schedule.sample_steps, cfg.schedule.sampler)
        for s, img in zip(seeds, images):
            container.atomic_write_bytes(os.path.join(out, f"sample_{s}.ppm"), ppm_bytes(img))
        write_resolved(out, cfg, extra)
    print(out)
    return EXIT_OK


def cmd_finetune(args, cfg):
    from .lora import StyleCheckpoint, finetune, init_lora, reference_embedding, save_checkpoint
    from .probe import HierarchicalScales, default_probe_prompts, probe_references

    model = _load_model(args.model)
    paths = split_paths(args.refs)
    refs = _load_refs(paths)
    captions = _captions(args, paths)
    ft = cfg.finetune
    ft.seed = _seed(args, ft.seed)
    steps = ft.steps_per_image * len(refs) if args.steps is None else int(args.steps)
    extra = {"model": os.path.abspath(args.model), "refs": [os.path.abspath(p) for p in paths],
             "captions": [list(c) for c in captions], "steps": steps, "scales": args.scales}
    out = run_dir(cfg, args, extra)
    with RunLock(out):
        sched = _schedule(cfg)
        if args.scales:
            scales = HierarchicalScales.load(require(args.scales, "scales"))
        else:
            prompts = [parse_prompt(p) for p in cfg.probe.prompts] or default_probe_prompts(
                [c[0] for c in captions], cfg.probe.count)
            scales = probe_references(model, refs, sched, prompts, cfg.probe.seed, cfg.probe.T_inf).scales
        emb = reference_embedding(model, refs)
        adapter = init_lora(model.denoiser, ft.rank, ft.seed, ft.alpha)
        base_hash = model.digest()
        history = finetune(model, adapter, list(zip(refs, captions)), scales, steps, ft.lr, ft.seed, ft.batch,
                           os.path.join(out, "train_log.csv"), sched, emb)
        ckpt = StyleCheckpoint(base_hash, scales, adapter, emb,
                               {"steps": steps, "lr": ft.lr, "references": len(refs), "seed": ft.seed})
        save_checkpoint(ckpt, os.path.join(out, "style.adaptr"))
        write_resolved(out, cfg, extra)
    print(f"{len(history)} steps, checkpoint {os.path.join(out, 'style.adaptr')}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .data import SUBJECTS, CorpusManifest
    from .eval import ContentProbe, fit_style_probe, multiplier_sweep
    from .lora import load_checkpoint
    from .pipeline import generate, scaled

    model = _load_model(args.model)
    ckpt = load_checkpoint(require(args.checkpoint, "checkpoint"))
    if ckpt.base_hash != model.digest():
        raise IncompatibilityError("checkpoint base-model hash differs from the loaded model")
    corpus = require(args.corpus, "corpus")
    manifest = CorpusManifest.load(corpus)
    ev = cfg.eval
    if args.style:
        ev.style = args.style
    if args.grid:
        ev.grid = [float(g) for g in args.grid.split(",")]
    ev.seed_base = _seed(args, ev.seed_base)
    if ev.style not in manifest.styles:
        raise ParameterError(f"unknown style {ev.style!r}; corpus has {sorted(manifest.styles)}")
    extra = {"model": os.path.abspath(args.model), "checkpoint": os.path.abspath(args.checkpoint),
             "corpus": manifest.digest()}
    out = run_dir(cfg, args, extra)
    with RunLock(out):
        pre = [manifest.styles[s] for s in manifest.style_ids("pretrain")]
        style_probe = fit_style_probe(list(manifest.styles.values()), ev.style_renders, ev.probe_seed)
        content_probe = ContentProbe.train(pre, ev.content_per_style, ev.content_random_styles, seed=ev.probe_seed)
        ckpt.apply(model)
        sched = _schedule(cfg)
        prompts = [(SUBJECTS[i % len(SUBJECTS)], ()) for i in range(ev.samples)]
        seeds = [ev.seed_base + i for i in range(ev.samples)]

        def gen(m, prompts, seeds):
            with scaled(model, ckpt.scales, m):
                return generate(model, prompts, seeds, ckpt.embedding.data, sched, cfg.schedule.sample_steps,
                                cfg.schedule.sampler)

        report = multiplier_sweep(gen, prompts, seeds, ev.style, style_probe, content_probe, ev.grid,
                                  {"config": cfg.to_dict(), **extra})
        report.write(out)
        write_resolved(out, cfg, extra)
    print(report.to_csv(), end="")
    print(f"spearman(multiplier, style) = {report.spearman():.3f}")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "sample": cmd_sample,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="artifact directory (default: runs/<command>-<config hash>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stylelab", description="Toy style-adapter pipeline on synthetic images.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="render the synthetic style corpus")

    sp = sub.add_parser("pretrain", parents=[common], help="train the base model on a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("probe", parents=[common], help="record traces and compute hierarchical scales")
    sp.add_argument("--model", required=True)
    sp.add_argument("--refs", required=True, help="comma-separated reference PPM paths")

    sp = sub.add_parser("sample", parents=[common], help="generate images")
    sp.add_argument("--model", required=True)
    sp.add_argument("--prompt", default="circle", help="e.g. 'small star'")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--refs")
    sp.add_argument("--scales")
    sp.add_argument("--checkpoint")
    sp.add_argument("--multiplier", type=float, default=1.0)
    sp.add_argument("--text-only", action="store_true", help="drop the image branch entirely")

    sp = sub.add_parser("finetune", parents=[common], help="fit a LoRA style adapter")
    sp.add_argument("--model", required=True)
    sp.add_argument("--refs", required=True)
    sp.add_argument("--captions", help="comma-separated captions when refs are outside a corpus")
    sp.add_argument("--scales")
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("eval", parents=[common], help="multiplier sweep of a style checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--style")
    sp.add_argument("--grid", help="comma-separated multipliers")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config is None or os.path.exists(args.config) else None
        if cfg is None:
            raise MissingArtifact(f"config not found: {args.config}")
        if getattr(args, "multiplier", 0.0) < 0:
            raise ParameterError("--multiplier must be non-negative")
        if getattr(args, "count", 1) < 1:
            raise ParameterError("--count must be positive")
        with thread_limit():
            return COMMANDS[args.command](args, cfg)
    except (ParameterError, VocabularyError, DimensionError, InputError) as exc:
        print(f"stylelab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, IncompatibilityError, FormatError, StateError) as exc:
        print(f"stylelab: missing or incompatible prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"stylelab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"stylelab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
