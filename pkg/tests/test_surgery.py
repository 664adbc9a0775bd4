import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerdrop_oracle import brute_force_indices, check_all
from offsite.model import ModelConfig, forward_full, init_model
from offsite.surgery import (
    EmulatorSpec,
    EmulatorSpecError,
    IntegrationError,
    PlanError,
    SplitPlan,
    build_emulator,
    emulated_model,
    magnitude_prune,
    plug_in,
    quantize_dequantize,
    quantize_scale,
    split,
    uniform_layer_drop,
)
from offsite.tensor import no_grad

CFG = ModelConfig(n_layers=8, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16)


@pytest.fixture(scope="module")
def model():
    return init_model(CFG, seed=0)


# ------------------------------------------------------------------ layer drop


def test_layer_drop_examples():
    assert uniform_layer_drop(4, 2).retained_indices == (0, 3)
    assert uniform_layer_drop(6, 3).retained_indices == (0, 3, 5)  # 2.5 rounds up
    assert uniform_layer_drop(5, 5).retained_indices == (0, 1, 2, 3, 4)
    assert uniform_layer_drop(28, 18).retained_indices == (0, 2, 3, 5, 6, 8, 10, 11, 13, 14, 16, 17, 19, 21, 22,
                                                          24, 25, 27)


def test_layer_drop_oracle_all_small_plans():
    assert check_all(lambda m, k: uniform_layer_drop(m, k).retained_indices) == []


def test_oracle_catches_a_wrong_rule():
    # banker's rounding differs on ties; the suite must notice
    bankers = lambda m, k: [round(j * (m - 1) / (k - 1)) for j in range(k)]
    assert any(v == "oracle-mismatch" for *_, v in check_all(bankers, 8))


@pytest.mark.parametrize("m,k", [(4, 1), (4, 5), (1, 1)])
def test_layer_drop_rejects_bad_k(m, k):
    with pytest.raises(PlanError):
        uniform_layer_drop(m, k)


def test_gpt2_xl_plan():
    plan = uniform_layer_drop(44, 16)
    assert plan.retained_indices == tuple(brute_force_indices(44, 16))
    assert len(plan.retained_indices) == 16


# ------------------------------------------------------------------ split


def test_split_plan_parse_and_validate():
    p = SplitPlan.parse("2+3")
    assert (p.n_bottom, p.n_top) == (2, 3)
    assert p.adapter_indices(8) == [0, 1, 5, 6, 7] and p.middle_indices(8) == [2, 3, 4]
    with pytest.raises(PlanError):
        SplitPlan.parse("two")
    with pytest.raises(PlanError):
        SplitPlan(4, 4).validate(8)
    with pytest.raises(PlanError):
        SplitPlan(-1, 2).validate(8)


def test_split_copies_and_marks_trainable(model):
    h = model.weight_hash()
    sm = split(model, SplitPlan(2, 2))
    assert sm.m == 4 and len(sm.a1) == 2 and len(sm.a2) == 2
    assert all(t.requires_grad for b in sm.a1 + sm.a2 for t in b.params.values())
    assert not any(t.requires_grad for b in sm.middle for t in b.params.values())
    assert not any(t.requires_grad for t in sm.model.shell.values())
    sm.a1[0].params["ln1.gain"].data[:] = 5
    assert model.weight_hash() == h
    assert sm.provenance.base_hash == h


def test_zero_plan_warns(model):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        split(model, SplitPlan(0, 0))
    assert any("empty" in str(x.message) for x in w)


def test_zero_step_plug_in_is_bitwise_identity(model):
    sm = split(model, SplitPlan(2, 2))
    plugged = plug_in(model, sm.adapter())
    assert plugged.weight_hash() == model.weight_hash()
    ids = np.arange(12)[None] % CFG.vocab_size
    with no_grad():
        assert np.array_equal(forward_full(plugged, ids).data, forward_full(model, ids).data)


def test_plug_in_rejects_foreign_adapter(model):
    other = init_model(CFG, seed=1)
    with pytest.raises(IntegrationError):
        plug_in(other, split(model, SplitPlan(2, 2)).adapter())


def test_plug_in_replaces_only_adapter_blocks(model):
    sm = split(model, SplitPlan(2, 2))
    sm.a2[1].params["mlp.fc.bias"].data[:] = 1.0
    out = plug_in(model, sm.adapter())
    assert np.all(out.blocks[7].params["mlp.fc.bias"].data == 1.0)
    for i in range(2, 6):
        for k, t in out.blocks[i].params.items():
            assert np.array_equal(t.data, model.blocks[i].params[k].data)


# ------------------------------------------------------------------ emulator


def test_layer_drop_emulator_copies_retained_blocks(model):
    sm = split(model, SplitPlan(2, 2))
    emu = build_emulator(sm, EmulatorSpec.layer_drop(4, 2))
    assert emu.source_indices == (0, 3)
    assert len(emu.blocks) == 2
    for blk, j in zip(emu.blocks, (0, 3)):
        for k, t in blk.params.items():
            assert np.array_equal(t.data, sm.middle[j].params[k].data)
            assert not np.shares_memory(t.data, sm.middle[j].params[k].data)
    assert emulated_model(sm, emu).config.n_layers == 6


def test_full_width_layer_drop_is_identity(model):
    sm = split(model, SplitPlan(2, 2))
    emu = build_emulator(sm, EmulatorSpec.layer_drop(4, 4))
    ids = np.arange(10)[None] % CFG.vocab_size
    with no_grad():
        assert np.array_equal(forward_full(emulated_model(sm, emu), ids).data, forward_full(model, ids).data)


def test_compressed_emulators_touch_only_weight_matrices(model):
    sm = split(model, SplitPlan(2, 2))
    for spec in (EmulatorSpec.magnitude_prune(0.5), EmulatorSpec.quantize(4)):
        emu = build_emulator(sm, spec)
        assert len(emu.blocks) == 4
        for blk, src in zip(emu.blocks, sm.middle):
            for k, t in blk.params.items():
                if t.data.ndim == 1:
                    assert np.array_equal(t.data, src.params[k].data)
        if spec.method == "magnitude_prune":
            w = emu.blocks[0].params["mlp.fc.weight"].data
            assert (w == 0).sum() == w.size // 2


def test_emulator_spec_validation():
    with pytest.raises(EmulatorSpecError):
        EmulatorSpec("layer_drop")
    with pytest.raises(EmulatorSpecError):
        EmulatorSpec.magnitude_prune(1.0)
    with pytest.raises(EmulatorSpecError):
        EmulatorSpec.quantize(1)
    with pytest.raises(EmulatorSpecError):
        EmulatorSpec("svd")
    spec = EmulatorSpec.layer_drop(6, 3, distilled=True)
    assert EmulatorSpec.from_dict(spec.to_dict()) == spec
    assert spec.digest() != EmulatorSpec.layer_drop(6, 3).digest()


def test_plan_mismatch_is_rejected(model):
    sm = split(model, SplitPlan(2, 2))
    from offsite.surgery import EmulatorSpecError as E

    with pytest.raises(E):
        build_emulator(sm, EmulatorSpec.layer_drop(5, 2))


# ------------------------------------------------------------------ compression properties

finite = st.floats(-100, 100, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(w=arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite),
       s=st.floats(0, 0.99))
def test_prune_properties(w, s):
    out = magnitude_prune(w, s)
    n = int(np.floor(s * w.size))
    zeroed = (out == 0) & (w != 0)
    assert zeroed.sum() <= n
    assert ((out == 0) | (out == w)).all()  # survivors untouched
    kept = out != 0
    if kept.any() and (~kept & (w != 0)).any():
        assert np.abs(w[~kept]).max() <= np.abs(w[kept]).min()
    np.testing.assert_array_equal(magnitude_prune(w, s), out)  # deterministic


def test_prune_ties_go_to_lower_index():
    w = np.array([1.0, -1.0, 1.0, 2.0], dtype=np.float32)
    assert magnitude_prune(w, 0.5).tolist() == [0.0, 0.0, 1.0, 2.0]


@settings(max_examples=60, deadline=None)
@given(w=arrays(np.float32, st.integers(1, 40), elements=finite), bits=st.integers(2, 16))
def test_quantize_properties(w, bits):
    out = quantize_dequantize(w, bits)
    scale = quantize_scale(w, bits)
    qmax = 2 ** (bits - 1) - 1
    if scale == 0:
        assert np.all(out == 0)
        return
    q = np.round(out.astype(np.float64) / scale)
    assert np.all(np.abs(q) <= qmax)
    assert len(np.unique(q)) <= 2 * qmax + 1
    assert np.max(np.abs(out.astype(np.float64) - w)) <= scale / 2 * (1 + 1e-5) + 1e-6
    np.testing.assert_array_equal(quantize_dequantize(out, bits), quantize_dequantize(out, bits))


def test_quantize_half_away_from_zero():
    w = np.array([2.5, -2.5, 1.5, 7.0])  # scale = 7/7 = 1 at 4 bits
    assert quantize_dequantize(w, 4).tolist() == [3.0, -3.0, 2.0, 7.0]


def test_more_bits_never_hurt():
    w = np.random.default_rng(0).standard_normal((20, 20)).astype(np.float32)
    errs = [np.abs(quantize_dequantize(w, b) - w).max() for b in (2, 4, 8, 16)]
    assert errs == sorted(errs, reverse=True)
