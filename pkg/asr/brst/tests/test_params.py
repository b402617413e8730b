"""Parameter accounting of the full-scale presets, exact to the unit."""

from __future__ import annotations

import pytest

from brst.config import PRESET_NAMES, REFERENCE_PARAMS_MILLIONS, resolve_preset
from brst.model import build_model, count_params

from .conftest import tiny_config

FULL_TOTALS = {
    "baseline": 30_351_890,
    "BR": 7_992_338,
    "BRA-E": 8_781_842,
    "BRA-D": 8_387_090,
    "BRA-ED": 9_176_594,
    "BRA-E-S18": 9_176_594,
}
ADAPTER = 256 * 256 + 256


@pytest.mark.parametrize("preset", PRESET_NAMES)
def test_full_scale_totals(preset):
    assert count_params(resolve_preset(preset)).total == FULL_TOTALS[preset]


def test_component_sizes():
    report = count_params(resolve_preset("baseline"))
    assert report.components["frontend"] == 1_838_080
    assert report.encoder_block_size == 1_315_072
    assert report.decoder_block_size == 1_578_752
    assert report.components["ctc_head"] == 1_087_881
    assert report.components["attention_head"] == 1_087_881
    assert report.components["embedding"] == 1_083_648
    assert report.components["encoder_norm"] == report.components["decoder_norm"] == 512
    assert report.adapter_size == ADAPTER == 65_792


def test_reuse_removes_exactly_the_extra_block_sets():
    baseline = count_params(resolve_preset("baseline"))
    shared = count_params(resolve_preset("BR"))
    assert baseline.total - shared.total == 11 * 1_315_072 + 5 * 1_578_752
    assert shared.encoder_block_sets == shared.decoder_block_sets == 1


@pytest.mark.parametrize(
    ("preset", "adapters"),
    [("BRA-E", 12), ("BRA-D", 6), ("BRA-ED", 18), ("BRA-E-S18", 18)],
)
def test_adapter_deltas(preset, adapters):
    delta = count_params(resolve_preset(preset)).total - FULL_TOTALS["BR"]
    assert delta == adapters * ADAPTER


def test_reuse_ratio_against_baseline():
    ratio = FULL_TOTALS["BR"] / FULL_TOTALS["baseline"]
    assert 0.26 < ratio < 0.27


@pytest.mark.parametrize("preset", PRESET_NAMES)
def test_published_budgets_within_five_percent(preset):
    millions = FULL_TOTALS[preset] / 1e6
    assert millions == pytest.approx(REFERENCE_PARAMS_MILLIONS[preset], rel=0.05)


def test_built_model_agrees_with_config_count():
    cfg = tiny_config(adapters_encoder=True, adapters_decoder=True)
    params = build_model(cfg)
    from_params, from_config = count_params(params), count_params(cfg)
    assert from_params.components == from_config.components
    assert from_params.total == params.store.num_elements()


def test_toy_presets_keep_the_ordering():
    totals = {name: count_params(resolve_preset(name, "toy")).total for name in PRESET_NAMES}
    assert totals["BR"] < totals["BRA-D"] < totals["BRA-E"] < totals["BRA-ED"] < totals["baseline"]
    assert totals["BRA-E-S18"] == totals["BRA-ED"]
