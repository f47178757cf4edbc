import numpy as np
import pytest

from stylelab import tensor as T
from stylelab.model import DenoiserConfig
from stylelab.pretrain import build_base_model

TINY = DenoiserConfig(image_size=8, patch_size=4, width=16, heads=2, layers=2, text_width=16, image_width=16,
                      time_width=16, encoder_width=16, mlp_ratio=2)
# full 32x32 images, small network; used where real renders are needed
SMALL = DenoiserConfig(image_size=32, patch_size=8, width=32, heads=2, layers=2, text_width=32, image_width=32,
                       time_width=32, encoder_width=32, mlp_ratio=2)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_head(model, seed=0, std=0.05):
    """Zero-init heads block every upstream gradient; give the tiny test nets a live output."""
    r = np.random.default_rng(seed)
    head = model.denoiser.head
    head.weight.data = r.normal(0, std, head.weight.shape).astype(head.weight.data.dtype)
    for b in model.denoiser.blocks:
        b.time.weight.data = r.normal(0, std, b.time.weight.shape).astype(b.time.weight.data.dtype)
    return model


@pytest.fixture
def tiny_model():
    return randomize_head(build_base_model(TINY, seed=3))


def random_cond(model, batch, rng, image=True):
    from stylelab.data import SUBJECTS

    prompts = [SUBJECTS[i % len(SUBJECTS)] for i in range(batch)]
    cfg = model.config
    tokens = rng.normal(size=(batch, cfg.image_tokens, cfg.image_width)).astype(T.get_dtype()) if image else None
    return model.condition(prompts, tokens)


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_support import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
