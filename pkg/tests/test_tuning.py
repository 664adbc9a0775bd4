import numpy as np
import pytest

from offsite.model import PRESETS, ModelConfig, forward_full, init_model
from offsite.surgery import EmulatorSpec, SplitPlan, build_emulator, plug_in, split
from offsite.tensor import OptimizerState, adamw_step, backward, no_grad
from offsite.tuning import (
    BottleneckSpec,
    LoraSpec,
    PeftError,
    TrainConfig,
    TrainingError,
    attach_peft,
    composed_model,
    finetune,
    is_bias_like,
    lm_loss,
    train_lm,
    trainable_count,
)

CFG = ModelConfig(n_layers=6, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=16)


def _perturbed_model(seed=0):
    m = init_model(CFG, seed)
    r = np.random.default_rng(seed)
    for t in m.named_parameters().values():
        t.data = (t.data + 0.05 * r.standard_normal(t.shape)).astype(np.float32)
    return m


@pytest.fixture
def sm():
    return split(_perturbed_model(), SplitPlan(2, 2))


IDS = np.random.default_rng(9).integers(0, 32, (2, 12))


def _logits(model):
    with no_grad():
        return forward_full(model, IDS).data


@pytest.mark.parametrize("mode", ["lora", "bottleneck", "bitfit"])
def test_fresh_peft_is_output_neutral(sm, mode):
    before = _logits(sm.model)
    adapter = attach_peft(sm.adapter().clone(), mode)
    after = _logits(composed_model(sm, adapter, sm.middle))
    np.testing.assert_array_equal(before, after)


@pytest.mark.parametrize("mode", ["lora", "bottleneck", "bitfit"])
def test_gradients_reach_only_peft_parameters(sm, mode):
    adapter = attach_peft(sm.adapter().clone(), mode)
    model = composed_model(sm, adapter, sm.middle)
    backward(lm_loss(model, IDS[:, :-1], IDS[:, 1:]))
    trainable = adapter.trainable_parameters()
    assert trainable
    for name, t in adapter.named_parameters().items():
        if name in trainable:
            assert t.grad is not None, name
        else:
            assert t.grad is None, name
    for blk in sm.middle:
        assert all(t.grad is None for t in blk.params.values())
    if mode == "lora":
        # B starts at zero, so A gets no gradient yet but B does
        assert any(np.any(t.grad != 0) for k, t in trainable.items() if k.endswith(".B"))
    if mode == "bitfit":
        assert all(is_bias_like(k) for k in trainable)


def test_peft_counts_match_closed_form(sm):
    d, f = CFG.d_model, CFG.d_ff
    lora = attach_peft(sm.adapter().clone(), "lora", lora=LoraSpec(rank=2))
    assert trainable_count(lora) == 4 * 2 * (4 * d + 2 * d + 2 * (d + f))
    bott = attach_peft(sm.adapter().clone(), "bottleneck", bottleneck=BottleneckSpec(dim=3))
    assert trainable_count(bott) == 4 * 2 * (2 * d * 3 + 3 + d)
    bit = attach_peft(sm.adapter().clone(), "bitfit")
    assert trainable_count(bit) == 4 * (9 * d + f)
    assert trainable_count(sm.adapter()) == 4 * (4 * d * d + 2 * d * f + 9 * d + f)


def test_double_attach_is_rejected(sm):
    a = attach_peft(sm.adapter().clone(), "lora")
    with pytest.raises(PeftError):
        attach_peft(a, "bitfit")
    with pytest.raises(PeftError):
        attach_peft(sm.adapter().clone(), "prefix")


def test_loss_drops_on_fixed_batch():
    model = init_model(PRESETS["toy"], seed=0)
    model.set_requires_grad(True)
    batch = np.random.default_rng(0).integers(0, 256, (8, 65))  # 512 predicted tokens
    params = model.named_parameters()
    opt = OptimizerState(weight_decay=0.0)
    losses = []
    for _ in range(50):
        loss = lm_loss(model, batch[:, :-1], batch[:, 1:])
        losses.append(loss.item())
        backward(loss)
        adamw_step(params, opt, 1e-3)
        for t in params.values():
            t.grad = None
    assert losses[-1] <= 0.8 * losses[0]


def _tokens(n=4000, seed=0):
    # a learnable sequence: a noisy periodic pattern
    r = np.random.default_rng(seed)
    base = np.tile(np.arange(32), n // 32 + 1)[:n]
    return np.where(r.random(n) < 0.1, r.integers(0, 32, n), base)


def test_train_lm_logs_and_updates_in_place():
    model = _perturbed_model()
    model.set_requires_grad(True)
    h = model.weight_hash()
    cfg = TrainConfig(lr=3e-3, steps=6, warmup_steps=2, seq_len=8, batch_size=4, eval_every=3, eval_tokens=200)
    rows = train_lm(model, model.named_parameters(), _tokens(), cfg, val_tokens=_tokens(400, 1))
    assert model.weight_hash() != h
    assert [r["split"] for r in rows].count("validation") == 2
    assert [r["step"] for r in rows if r["split"] == "train"] == list(range(1, 7))
    assert rows[0]["lr"] == 0.0 and rows[2]["lr"] == pytest.approx(3e-3)


def test_train_lm_errors():
    model = _perturbed_model()
    cfg = TrainConfig(steps=1, seq_len=8, batch_size=4)
    with pytest.raises(TrainingError):
        train_lm(model, {}, _tokens(), cfg)
    model.set_requires_grad(True)
    with pytest.raises(TrainingError):
        train_lm(model, model.named_parameters(), _tokens(20), cfg)


def test_finetune_zero_steps_returns_adapter_unchanged(sm):
    h = sm.adapter().weight_hash()
    res = finetune(sm, sm.middle, _tokens(), _tokens(300, 1), TrainConfig(steps=0, seq_len=8, batch_size=4))
    assert res.adapter.weight_hash() == h
    assert plug_in(sm.model, res.adapter).weight_hash() == sm.model.weight_hash()


def test_finetune_grid_picks_lowest_validation_loss(sm):
    emu = build_emulator(sm, EmulatorSpec.layer_drop(2, 2))
    cfg = TrainConfig(steps=4, warmup_steps=1, seq_len=8, batch_size=4, eval_tokens=300)
    mid_hash = [b.clone() for b in sm.middle]
    res = finetune(sm, emu.blocks, _tokens(), _tokens(300, 1), cfg, lr_grid=[1e-5, 3e-3])
    assert set(res.grid) == {1e-5, 3e-3}
    assert res.val_loss == min(res.grid.values()) and res.grid[res.lr] == res.val_loss
    for a, b in zip(mid_hash, sm.middle):
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)


def test_finetune_is_deterministic(sm):
    cfg = TrainConfig(steps=3, warmup_steps=1, seq_len=8, batch_size=4, eval_tokens=200)
    a = finetune(sm, sm.middle, _tokens(), _tokens(300, 1), cfg, peft="lora")
    b = finetune(sm, sm.middle, _tokens(), _tokens(300, 1), cfg, peft="lora")
    assert a.adapter.weight_hash() == b.adapter.weight_hash() and a.val_loss == b.val_loss
