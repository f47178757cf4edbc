from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY, random_cond, randomize_head
from gradsuite import check_module_loss
from oracles import naive_attention
from stylelab import tensor as T
from stylelab.conditioning import ConditionPair
from stylelab.diffusion import denoise_loss, make_batch, make_schedule
from stylelab.errors import DimensionError, ParameterError
from stylelab.lora import init_lora
from stylelab.model import (
    DenoiserConfig,
    DualCrossAttention,
    build_denoiser,
    dual_attention_forward,
    effective_scales,
    set_layer_scales,
)
from stylelab.nn import parameter_hash
from stylelab.pretrain import build_base_model


def closed_form_count(cfg):
    w, tw, iw, r = cfg.width, cfg.text_width, cfg.image_width, cfg.mlp_ratio
    lin = lambda i, o, bias=True: i * o + (o if bias else 0)  # noqa: E731
    block = (
        lin(w, w)  # timestep shift
        + 3 * 2 * w  # three layer norms
        + 3 * lin(w, w, False) + lin(w, w)  # self-attention
        + lin(w, w, False) + 2 * lin(tw, w, False) + 2 * lin(iw, w, False) + lin(w, w)  # dual cross-attention
        + lin(w, w * r) + lin(w * r, w)  # MLP
    )
    return (lin(cfg.patch_dim, w) + lin(cfg.time_width, w) + lin(w, w) + cfg.layers * block + 2 * w
            + lin(w, cfg.patch_dim))


def test_parameter_count_matches_closed_form():
    cfg = DenoiserConfig()
    assert build_denoiser(cfg, 0).num_parameters() == closed_form_count(cfg)
    assert build_denoiser(TINY, 0).num_parameters() == closed_form_count(TINY)


def test_same_seed_same_parameters():
    assert parameter_hash(build_denoiser(TINY, 5)) == parameter_hash(build_denoiser(TINY, 5))
    assert parameter_hash(build_denoiser(TINY, 5)) != parameter_hash(build_denoiser(TINY, 6))


@pytest.mark.parametrize("kw", [{"width": 10, "heads": 4}, {"image_size": 30, "patch_size": 4}, {"layers": 0}])
def test_invalid_config_rejected(kw):
    with pytest.raises(ParameterError):
        build_denoiser(DenoiserConfig(**kw), 0)


def test_image_projections_copied_from_text():
    layer = build_denoiser(TINY, 0).cross_layers[0]
    np.testing.assert_array_equal(layer.ik.weight.data, layer.k.weight.data)
    np.testing.assert_array_equal(layer.iv.weight.data, layer.v.weight.data)


def _layer(seed=0, width=8, heads=1):
    return DualCrossAttention(np.random.default_rng(seed), width, heads, width, width, 0, 0.1)


def test_dual_attention_matches_naive_loops(f64):
    rng = np.random.default_rng(9)
    layer = _layer(1)
    layer.ik.weight.data = rng.normal(size=(8, 8))  # decouple from the text projections
    layer.image_scale = 0.7
    z, c_t, c_i = rng.normal(size=(2, 8)), rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    Z, Zt, Zi = dual_attention_forward(layer, z, c_t, c_i)
    q = z @ layer.q.weight.data
    zt = naive_attention(q, c_t @ layer.k.weight.data, c_t @ layer.v.weight.data)
    zi = naive_attention(q, c_i @ layer.ik.weight.data, c_i @ layer.iv.weight.data)
    np.testing.assert_allclose(Zt.data, zt, atol=1e-6)
    np.testing.assert_allclose(Zi.data, zi, atol=1e-6)
    np.testing.assert_allclose(Z.data, zt + 0.7 * zi, atol=1e-6)


def test_dual_attention_zero_scale_is_text_only(rng):
    layer = _layer(2)
    layer.image_scale = 0.0
    z, c_t, c_i = (rng.normal(size=s).astype(np.float32) for s in ((5, 8), (3, 8), (4, 8)))
    Z, Zt, _ = dual_attention_forward(layer, z, c_t, c_i)
    assert Z.data.tobytes() == Zt.data.tobytes()


def test_zero_image_condition_has_no_contribution(rng):
    layer = _layer(3)
    layer.iv.weight.data = np.zeros_like(layer.iv.weight.data)
    z, c_t = rng.normal(size=(5, 8)).astype(np.float32), rng.normal(size=(3, 8)).astype(np.float32)
    Z, Zt, Zi = dual_attention_forward(layer, z, c_t, np.zeros((4, 8), np.float32))
    assert np.all(Zi.data == 0)
    assert T.cosine(Zt, Z).item() == pytest.approx(1.0, abs=1e-6)


def test_dual_attention_width_mismatch(rng):
    layer = _layer(0)
    with pytest.raises(DimensionError):
        dual_attention_forward(layer, np.zeros((2, 8)), np.zeros((3, 6)), np.zeros((4, 8)))
    with pytest.raises(DimensionError):
        dual_attention_forward(layer, np.zeros((2, 8)), np.zeros((3, 8)), np.zeros((4, 5)))


def test_scale_multiplier_example():
    den = build_denoiser(TINY, 0)
    set_layer_scales(den, [0.8, 0.3], 0.5)
    assert effective_scales(den)[0] == pytest.approx(0.4)
    set_layer_scales(den, [0.8, 0.3], 0.0)
    assert effective_scales(den) == [0.0, 0.0]


def test_set_layer_scales_errors():
    den = build_denoiser(TINY, 0)
    with pytest.raises(ParameterError):
        set_layer_scales(den, [1.0], 1.0)
    with pytest.raises(ParameterError):
        set_layer_scales(den, [1.0, 1.0], -0.1)


def _predict(model, x, t, cond):
    return model.denoiser.predict_eps(x, t, cond)


def test_unit_scales_match_unscaled(tiny_model, rng):
    x = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
    cond = random_cond(tiny_model, 3, rng)
    before = _predict(tiny_model, x, [5, 50, 500], cond)
    set_layer_scales(tiny_model.denoiser, [1.0, 1.0], 1.0)
    assert _predict(tiny_model, x, [5, 50, 500], cond).tobytes() == before.tobytes()


def test_zero_multiplier_matches_text_only_forward(tiny_model, rng):
    x = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
    cond = random_cond(tiny_model, 3, rng)
    set_layer_scales(tiny_model.denoiser, [0.6, 1.0], 0.0)
    a = _predict(tiny_model, x, [5, 50, 500], cond)
    b = _predict(tiny_model, x, [5, 50, 500], ConditionPair(cond.text))
    assert np.abs(a - b).max() <= 1e-6


def test_probe_hooks_do_not_change_outputs(tiny_model, rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    cond = random_cond(tiny_model, 2, rng)
    before = _predict(tiny_model, x, [10, 900], cond)
    seen = []
    tiny_model.denoiser.set_probe(lambda d, z, zt, zi: seen.append(d))
    after = _predict(tiny_model, x, [10, 900], cond)
    tiny_model.denoiser.set_probe(None)
    assert seen == [0, 1]
    assert before.tobytes() == after.tobytes()


def test_fresh_lora_is_neutral(tiny_model, rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    cond = random_cond(tiny_model, 2, rng)
    before = _predict(tiny_model, x, [10, 900], cond)
    init_lora(tiny_model.denoiser, rank=2, seed=0)
    assert _predict(tiny_model, x, [10, 900], cond).tobytes() == before.tobytes()


def test_only_lora_receives_gradients(tiny_model, rng):
    adapter = init_lora(tiny_model.denoiser, rank=2, seed=0)
    for pair in adapter.pairs.values():
        pair.B.data = rng.normal(0, 0.1, pair.B.shape).astype(np.float32)
    tiny_model.requires_grad_(False)
    cond = random_cond(tiny_model, 2, rng)
    b = make_batch(rng.uniform(-1, 1, (2, 3, 8, 8)), make_schedule(1000), rng)
    T.backward(denoise_loss(tiny_model.denoiser, b, cond))
    assert all(p.grad is None for p in tiny_model.parameters())
    grads = [p.grad for p in adapter.parameters()]
    assert all(g is not None for g in grads) and any(np.abs(g).max() > 0 for g in grads)


def test_full_denoiser_loss_gradients(f64):
    model = randomize_head(build_base_model(TINY, 2), std=0.3)
    rng = np.random.default_rng(0)
    cond_ids = model.prompt_ids(["circle", ("star", ("small",))])
    images = rng.uniform(-1, 1, (2, 3, 8, 8))
    batch = make_batch(rng.uniform(-1, 1, (2, 3, 8, 8)), make_schedule(1000), rng)

    def loss():
        cond = ConditionPair(model.text(cond_ids), model.encoder(images))
        return denoise_loss(model.denoiser, batch, cond)

    errors = check_module_loss(model, loss, max_entries=6)
    assert max(errors.values()) < 1e-4, sorted(errors.items(), key=lambda kv: -kv[1])[:3]


def test_v_prediction_skip_with_zero_head(rng):
    # zero-initialized head: F = 0, so eps = sqrt(1 - a) x_t and the implied x0 is sqrt(a) x_t
    model = build_base_model(TINY, 1)
    cond = random_cond(model, 3, rng)
    x = rng.normal(size=(3, 3, 8, 8)).astype(np.float32)
    t = np.array([1, 500, 1000])
    a = make_schedule(1000).alpha_bar[t]
    eps = model.denoiser.predict_eps(x, t, cond)
    np.testing.assert_allclose(eps, np.sqrt(1 - a)[:, None, None, None] * x, rtol=1e-6, atol=1e-6)
    custom = model.denoiser.predict_eps(x, t, cond, alpha_bar=np.array([0.5, 0.5, 0.5]))
    np.testing.assert_allclose(custom, np.sqrt(0.5) * x, rtol=1e-6)


def test_v_prediction_matches_manual_combination(rng):
    v_model = randomize_head(build_base_model(TINY, 2), std=0.2)
    raw = build_base_model(replace(TINY, prediction="eps"), 2)
    raw.load_state_dict(v_model.state_dict())
    cond = random_cond(v_model, 2, rng)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    a = np.array([0.9, 0.01])
    f = raw.denoiser.predict_eps(x, [10, 900], cond)
    eps = v_model.denoiser.predict_eps(x, [10, 900], cond, alpha_bar=a)
    expected = np.sqrt(1 - a)[:, None, None, None] * x + np.sqrt(a)[:, None, None, None] * f
    np.testing.assert_allclose(eps, expected, rtol=1e-5, atol=1e-6)


def test_v_weighted_loss_is_mse_against_v_target(rng):
    v_model = randomize_head(build_base_model(TINY, 3), std=0.2)
    raw = build_base_model(replace(TINY, prediction="eps"), 3)
    raw.load_state_dict(v_model.state_dict())
    cond = random_cond(v_model, 3, rng)
    batch = make_batch(rng.uniform(-1, 1, (3, 3, 8, 8)).astype(np.float32), make_schedule(1000), rng, t=[5, 400, 990])
    a = batch.alpha_bar.astype(np.float64)[:, None, None, None]
    v = np.sqrt(a) * batch.eps - np.sqrt(1 - a) * batch.x0
    f = raw.denoiser.predict_eps(batch.xt, batch.t, cond)
    expected = np.mean((f.astype(np.float64) - v) ** 2)
    got = denoise_loss(v_model.denoiser, batch, cond).item()
    assert got == pytest.approx(expected, rel=1e-4)
    # plain eps weighting on the same model is smaller by the alpha_bar factors
    assert denoise_loss(v_model.denoiser, batch, cond, weighting="eps").item() < got
    with pytest.raises(ParameterError):
        denoise_loss(v_model.denoiser, batch, cond, weighting="x0")


def test_prediction_mode_validated():
    with pytest.raises(ParameterError):
        build_denoiser(replace(TINY, prediction="x0"), 0)
    model = build_base_model(TINY, 0)
    with pytest.raises(ParameterError):
        model.denoiser.predict_eps(np.zeros((1, 3, 8, 8)), [5], model.condition(["ring"]), alpha_bar=[0.0])
