import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from offsite.accounting import (
    block_params,
    count_params,
    report_csv,
    total_params,
    transmitted_footprint,
)
from offsite.model import PRESETS, init_model
from offsite.surgery import EmulatorSpec, SplitPlan, split
from offsite.tuning import BottleneckSpec, LoraSpec, attach_peft, trainable_count

PLAN = SplitPlan(2, 2)


@pytest.mark.parametrize("preset", ["toy", "gpt2-xl", "opt-1.3b"])
def test_closed_form_matches_built_model(preset):
    cfg = PRESETS[preset]
    model = init_model(cfg, materialize=False)  # placeholders: shapes only
    named = model.named_parameters()
    assert total_params(cfg) == sum(t.data.size for t in named.values())
    rep = count_params(cfg, PLAN, "full")
    assert rep.total_params == total_params(cfg)
    for name, row in rep.breakdown.items():
        assert row["params"] == named[name].data.size, name
    assert block_params(cfg) == sum(t.data.size for k, t in named.items() if k.startswith("blocks.0."))


@pytest.mark.parametrize("arch", ["gpt2-like", "opt-like"])
def test_peft_counts_match_attached_adapters(arch):
    cfg = replace(PRESETS["toy"], arch=arch)
    sm = split(init_model(cfg, seed=0), PLAN)
    assert count_params(cfg, PLAN, "full").trainable_params == trainable_count(sm.adapter())
    got = {
        "lora": trainable_count(attach_peft(sm.adapter().clone(), "lora", lora=LoraSpec(rank=4))),
        "bottleneck": trainable_count(attach_peft(sm.adapter().clone(), "bottleneck", bottleneck=BottleneckSpec(64))),
        "bitfit": trainable_count(attach_peft(sm.adapter().clone(), "bitfit")),
    }
    for mode, n in got.items():
        assert count_params(cfg, PLAN, mode).trainable_params == n, mode


def test_published_scale_counts():
    exact = {
        "gpt2-xl": (1_475_561_600, 122_963_200, 409_600, 1_651_712, 83_200),
        "opt-1.3b": (1_208_602_624, 201_433_088, 589_824, 2_114_048, 106_496),
        "toy": (1_586_432, 793_088, 32_768, 132_608, 6_656),
    }
    for preset, want in exact.items():
        got = tuple(count_params(PRESETS[preset], PLAN, m).trainable_params
                    for m in ("ft", "full", "lora", "bottleneck", "bitfit"))
        assert got == want, preset


def test_block_ratios():
    toy = transmitted_footprint(PLAN, EmulatorSpec.layer_drop(4, 2), PRESETS["toy"])
    assert toy.block_ratio == pytest.approx(6 / 8)
    xl = transmitted_footprint(PLAN, EmulatorSpec.layer_drop(44, 16), PRESETS["gpt2-xl"])
    assert xl.block_ratio == pytest.approx(20 / 48)
    assert xl.transmitted_bytes < xl.full_bytes


def test_compressed_footprints_shrink_bytes():
    cfg = PRESETS["toy"]
    raw = transmitted_footprint(PLAN, EmulatorSpec.quantize(32), cfg)
    q8 = transmitted_footprint(PLAN, EmulatorSpec.quantize(8), cfg)
    pruned = transmitted_footprint(PLAN, EmulatorSpec.magnitude_prune(0.5), cfg)
    assert raw.transmitted_bytes == raw.full_bytes
    wp = 4 * 128 ** 2 + 2 * 128 * 512
    assert raw.transmitted_bytes - q8.transmitted_bytes == 4 * wp * 3
    assert raw.transmitted_params - pruned.transmitted_params == 4 * (wp // 2)


def test_unknown_mode_and_csv():
    with pytest.raises(ValueError):
        count_params(PRESETS["toy"], PLAN, "prefix")
    rows = list(csv.DictReader(io.StringIO(report_csv(count_params(PRESETS["toy"], PLAN, "bitfit")))))
    trainable = [r for r in rows if r["trainable"] == "1"]
    assert all(r["name"].endswith((".bias", ".gain")) for r in trainable)
    assert sum(int(r["params"]) for r in trainable) == 6_656
    assert not any(r["name"] in ("wte", "wpe") and r["trainable"] == "1" for r in rows)
    assert np.all([r["transmitted"] in ("0", "1") for r in rows])
