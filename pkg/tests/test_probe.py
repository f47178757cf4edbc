import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY, random_cond, randomize_head
from oracles import minmax_by_hand
from stylelab.conditioning import ConditionPair
from stylelab.diffusion import make_schedule
from stylelab.errors import DimensionError, ParameterError, TraceIntegrityError
from stylelab.model import effective_scales, set_layer_scales
from stylelab.probe import (
    ContributionTrace,
    HierarchicalScales,
    aggregate_traces,
    compute_hierarchical_scales,
    default_probe_prompts,
    layer_difference,
    minmax_normalize,
    probe_references,
    record_contributions,
    record_contributions_batch,
)
from stylelab.tensor import Tensor

SCHED = make_schedule(1000)


def _row(cond, i):
    return ConditionPair(Tensor(cond.text.data[i : i + 1]), Tensor(cond.image.data[i : i + 1]))


def test_zero_image_projections_give_unit_text_contribution(tiny_model, rng):
    for layer in tiny_model.denoiser.cross_layers:
        layer.ik.weight.data[:] = 0
        layer.iv.weight.data[:] = 0
    cond = random_cond(tiny_model, 1, rng)
    tr = record_contributions(tiny_model.denoiser, cond, SCHED, seed=0, T_inf=5)
    np.testing.assert_allclose(tr.P_t, 1.0, rtol=0, atol=1e-12)
    assert tr.P_t.shape == (TINY.layers, 5)


def test_orthogonal_equal_norm_branches():
    from stylelab.probe import _cos_rows

    zt = np.zeros((1, 4, 6))
    zi = np.zeros((1, 4, 6))
    zt[0, :, :3] = 1.0
    zi[0, :, 3:] = 1.0
    z = zt + zi
    assert _cos_rows(zt, z)[0] == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    assert _cos_rows(zi, z)[0] == pytest.approx(0.7071, abs=1e-4)


def test_trace_matches_offline_recomputation(tiny_model, rng):
    cond = random_cond(tiny_model, 1, rng)
    dump = []
    tr = record_contributions(tiny_model.denoiser, cond, SCHED, seed=3, T_inf=6, dump=dump)
    assert len(dump) == TINY.layers * 6
    for k, d, z, zt, zi in dump:
        z, zt, zi = (a.astype(np.float64).ravel() for a in (z, zt, zi))
        p_t = zt @ z / (np.linalg.norm(zt) * np.linalg.norm(z))
        p_i = zi @ z / (np.linalg.norm(zi) * np.linalg.norm(z))
        assert abs(tr.P_t[d, k] - p_t) < 1e-6
        assert abs(tr.P_i[d, k] - p_i) < 1e-6


def test_batched_probe_equals_single_runs(tiny_model, rng):
    cond = random_cond(tiny_model, 3, rng)
    batch = record_contributions_batch(tiny_model.denoiser, cond, SCHED, [5, 6, 7], T_inf=4)
    for i, seed in enumerate([5, 6, 7]):
        single = record_contributions(tiny_model.denoiser, _row(cond, i), SCHED, seed, T_inf=4)
        np.testing.assert_allclose(batch[i].P_t, single.P_t, atol=1e-6)
        np.testing.assert_allclose(batch[i].P_i, single.P_i, atol=1e-6)


def test_probe_forces_unit_scales_and_restores(tiny_model, rng):
    den = tiny_model.denoiser
    set_layer_scales(den, [0.0, 0.5], 0.3)
    seen = []
    sentinel = lambda *a: None  # noqa: E731
    den.cross_layers[0].probe = sentinel

    from stylelab import probe as probe_mod

    orig = probe_mod.sample
    probe_mod.sample = lambda *a, **kw: (seen.append(effective_scales(den)), orig(*a, **kw))[1]
    try:
        record_contributions(den, random_cond(tiny_model, 1, rng), SCHED, 0, T_inf=3)
    finally:
        probe_mod.sample = orig
    assert seen == [[1.0, 1.0]]
    assert effective_scales(den) == [0.0, pytest.approx(0.15)]
    assert den.cross_layers[0].probe is sentinel and den.cross_layers[1].probe is None


def test_missing_layer_is_integrity_error(tiny_model, rng, monkeypatch):
    layer = tiny_model.denoiser.cross_layers[1]
    original = type(layer).__call__

    def skip_probe(self, z, c_t, c_i):
        if self is layer:
            zz, _, _ = self.branches(z, c_t, c_i)
            return self.out(zz)
        return original(self, z, c_t, c_i)

    monkeypatch.setattr(type(layer), "__call__", skip_probe)
    with pytest.raises(TraceIntegrityError):
        record_contributions(tiny_model.denoiser, random_cond(tiny_model, 1, rng), SCHED, 0, T_inf=3)


def test_probe_requires_image_condition(tiny_model, rng):
    with pytest.raises(ParameterError):
        record_contributions(tiny_model.denoiser, random_cond(tiny_model, 1, rng, image=False), SCHED, 0, T_inf=3)


def test_probe_is_pure(tiny_model, rng):
    before = tiny_model.digest()
    probe_references(tiny_model, rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32), SCHED,
                     prompts=["circle", "star"], T_inf=3)
    assert tiny_model.digest() == before


def _trace(p_t, p_i, tag="M"):
    return ContributionTrace(np.asarray(p_t, float), np.asarray(p_i, float), tag)


def test_layer_difference_trivial_cases():
    np.testing.assert_array_equal(layer_difference(_trace(np.full((3, 4), 0.3), np.full((3, 4), 0.3))), 0.0)
    np.testing.assert_array_equal(layer_difference(_trace(np.zeros((3, 4)), np.ones((3, 4)))), 1.0)


def test_layer_difference_loop_oracle(rng):
    p_t, p_i = rng.uniform(-1, 1, (5, 7)), rng.uniform(-1, 1, (5, 7))
    got = layer_difference(_trace(p_t, p_i))
    for d in range(5):
        acc = 0.0
        for t in range(7):
            acc += p_i[d, t] - p_t[d, t]
        assert abs(got[d] - acc / 7) < 1e-9


def test_trace_validation():
    with pytest.raises(TraceIntegrityError):
        _trace(np.full((2, 3), np.nan), np.zeros((2, 3))).validate()
    with pytest.raises(TraceIntegrityError):
        _trace(np.full((2, 3), 1.5), np.zeros((2, 3))).validate()
    with pytest.raises(TraceIntegrityError):
        _trace(np.zeros((2, 3)), np.zeros((2, 4))).validate()


def _fixed(diff, tag="M"):
    # traces whose layer difference equals ``diff``
    diff = np.asarray(diff, float)
    return _trace(np.zeros((len(diff), 2)), np.stack([diff, diff], axis=1), tag)


def test_scales_hand_example():
    diffs = [0.2, -0.1, 0.05]
    hs = compute_hierarchical_scales([_fixed(np.zeros(3), 0)], [_fixed(diffs)])
    np.testing.assert_allclose(hs.scales, [1.0, 0.0, 0.5], rtol=0, atol=1e-15)
    np.testing.assert_allclose(hs.scales, minmax_by_hand(diffs), rtol=0, atol=1e-15)
    assert not hs.degenerate and hs.provenance["normalization"] == "minmax"


def test_scales_use_multi_minus_single():
    singles = [_fixed([0.1, 0.3, 0.0], 0), _fixed([0.3, 0.1, 0.0], 1)]
    hs = compute_hierarchical_scales(singles, [_fixed([0.6, 0.2, 0.4])])
    # D^S = [0.2, 0.2, 0.0]; D^M - D^S = [0.4, 0.0, 0.4]
    np.testing.assert_allclose(hs.scales, [1.0, 0.0, 1.0], atol=1e-12)


def test_degenerate_inputs_fall_back_to_ones():
    hs = compute_hierarchical_scales([_fixed([0.1, 0.1, 0.1], 0)], [_fixed([0.3, 0.3, 0.3])])
    assert hs.degenerate and list(hs.scales) == [1.0, 1.0, 1.0]
    one = compute_hierarchical_scales([_fixed([0.5], 0)], [_fixed([-0.2])])
    assert one.degenerate and list(one.scales) == [1.0]


def test_scales_input_errors():
    with pytest.raises(ParameterError):
        compute_hierarchical_scales([], [_fixed([0.1, 0.2])])
    with pytest.raises(ParameterError):
        compute_hierarchical_scales([_fixed([0.1, 0.2], 0)], [])
    with pytest.raises(DimensionError):
        compute_hierarchical_scales([_fixed([0.1, 0.2], 0)], [_fixed([0.1, 0.2, 0.3])])
    with pytest.raises(ParameterError):
        compute_hierarchical_scales([_fixed([0.1, 0.2])], [_fixed([0.1, 0.2])])


vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-2, 2, allow_nan=False))


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_minmax_monotone_and_bounded(diff):
    scales, degenerate = minmax_normalize(diff)
    assert np.all((scales >= 0) & (scales <= 1))
    if not degenerate:
        assert scales.min() == 0.0 and scales.max() == 1.0
        order = np.argsort(diff, kind="stable")
        assert np.all(np.diff(scales[order]) >= 0)
    else:
        assert np.all(scales == 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_aggregation_linearity(n_traces, layers, seed):
    r = np.random.default_rng(seed)
    traces = [_trace(r.uniform(-1, 1, (layers, 4)), r.uniform(-1, 1, (layers, 4))) for _ in range(n_traces)]
    pooled = layer_difference(aggregate_traces(traces))
    separate = np.mean([layer_difference(t) for t in traces], axis=0)
    np.testing.assert_allclose(pooled, separate, atol=1e-9)


def test_default_probe_prompts_avoid_reference_subjects():
    prompts = default_probe_prompts(["circle", "ring", "star"], 8)
    assert len(prompts) == 8 and len(set(prompts)) == 8
    assert all(p[0] not in {"circle", "ring", "star"} for p in prompts)
    crowded = default_probe_prompts(["circle", "ring", "star", "cross", "square"], 8)
    assert len(set(crowded)) == 8 and crowded[0][0] == "triangle"


def test_trace_file_and_csv_roundtrip(tmp_path, rng):
    tr = _trace(rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4)), 2)
    tr.prompt_id = "small star"
    tr.save(tmp_path / "t.trace")
    back = ContributionTrace.load(tmp_path / "t.trace")
    np.testing.assert_array_equal(back.P_t, tr.P_t)
    assert back.tag == 2 and back.prompt_id == "small star"
    lines = tr.to_csv().splitlines()
    assert lines[0] == "layer,timestep,P_t,P_i" and len(lines) == 1 + 12


def test_scales_file_roundtrip(tmp_path):
    hs = HierarchicalScales(np.array([0.0, 0.25, 1.0]), False, {"normalization": "minmax", "prompts": "abc"})
    hs.save(tmp_path / "s.json")
    back = HierarchicalScales.load(tmp_path / "s.json")
    assert back.scales.tolist() == hs.scales.tolist() and back.provenance == hs.provenance


def test_probe_references_artifact_counts(tiny_model, rng):
    refs = rng.uniform(-1, 1, (3, 3, 8, 8)).astype(np.float32)
    res = probe_references(tiny_model, refs, SCHED, prompts=["circle", "square"], T_inf=3)
    assert len(res.singles) == 6 and len(res.multi) == 2
    assert sorted({t.tag for t in res.singles}) == [0, 1, 2]
    assert len(res.scales) == TINY.layers
    assert np.all((res.scales.scales >= 0) & (res.scales.scales <= 1))
    assert res.scales.provenance["references"] and res.scales.provenance["prompts"]
