# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
from pathlib import Path

import numpy as np
import pytest

from stretchcap.exceptions import MalformedCaptureError, RankDeficiencyError
from stretchcap.layout import build_cells, bundled_layout, grid_layout
from stretchcap.readout import (
    Convention,
    ExtraPolicy,
    MandatoryPolicy,
    RowKind,
    TimerConfig,
    build_extra,
    build_mandatory,
    build_plan,
    capacitance_to_frequency,
    cells_for_combination,
    decode,
    estimate_frame_budget,
    frequency_to_capacitance,
    load_plan,
    read_frequency_csv,
    save_plan,
    simulate_measurements,
    singular_value_ratio,
    with_convention,
    write_frequency_csv,
)


@pytest.fixture(scope="module")
def grid_3x2():
    layout = bundled_layout("grid_3x2")
    return layout, build_cells(layout.strips)


def test_cells_for_combination(grid_3x2) -> None:
    layout, cells = grid_3x2
    keys = {cells[j].key for j in cells_for_combination(cells, {"1", "Γ"}, layout.strips)}
    assert keys == {"1/A", "1/B", "2/Γ"}
    assert cells_for_combination(cells, layout.strip_ids(), layout.strips) == frozenset()
    assert cells_for_combination(cells, {"A"}) == frozenset({0, 3})


def test_cells_for_combination_rejects_bad_sources(grid_3x2) -> None:
    layout, cells = grid_3x2
    with pytest.raises(ValueError, match="At least one"):
        cells_for_combination(cells, set(), layout.strips)
    with pytest.raises(ValueError, match="Unknown strip"):
        cells_for_combination(cells, {"Z"}, layout.strips)


def test_pair_rows_of_3x2_are_dependent(grid_3x2) -> None:
    layout, cells = grid_3x2
    with pytest.raises(RankDeficiencyError) as excinfo:
        build_mandatory(cells, layout.strips, MandatoryPolicy.PAIRS)
    assert excinfo.value.dependent_rows == (0, 1, 3, 4)


def test_mandatory_block_is_completed_with_singles(grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = build_mandatory(cells, layout.strips)
    assert plan.n_rows == plan.n_mandatory == 6
    assert singular_value_ratio(plan.matrix) > 1e-8
    assert frozenset({"1", "Γ"}) in plan.source_sets
    assert any(len(source) == 1 for source in plan.source_sets)


def test_simulated_measurement(grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = build_mandatory(cells, layout.strips)
    row = plan.source_sets.index(frozenset({"1", "Γ"}))
    assert simulate_measurements(plan, np.ones(6))[row] == pytest.approx(3.0)
    one_hot = np.eye(6)[2]
    np.testing.assert_array_equal(simulate_measurements(plan, one_hot), plan.matrix[:, 2])


def test_single_strip_extras(grid_3x2) -> None:
    layout, cells = grid_3x2
    mandatory = build_mandatory(cells, layout.strips)
    plan = build_extra(mandatory, cells, layout.strips, ExtraPolicy.SINGLE_STRIP)
    singles_in_mandatory = sum(len(s) == 1 for s in mandatory.source_sets)
    assert plan.n_rows - plan.n_mandatory == len(layout.strips) - singles_in_mandatory
    assert plan.row_kind[6:] == (RowKind.EXTRA,) * (plan.n_rows - 6)
    assert len({r.tobytes() for r in plan.matrix}) == plan.n_rows
    assert build_extra(mandatory, cells, layout.strips, ExtraPolicy.NONE).n_rows == 6


def test_one_by_one_grid_is_identity() -> None:
    layout = grid_layout(1, 1)
    plan = build_plan(build_cells(layout.strips), layout.strips, extra=ExtraPolicy.NONE)
    np.testing.assert_array_equal(plan.matrix, [[1.0]])


@pytest.mark.parametrize("n_top", range(1, 7))
def test_full_grids_have_full_rank(n_top: int) -> None:
    for n_bottom in range(1, 7):
        layout = grid_layout(n_top, n_bottom)
        plan = build_mandatory(build_cells(layout.strips), layout.strips)
        assert plan.n_rows == n_top * n_bottom
        assert singular_value_ratio(plan.matrix) > 1e-8


def test_noiseless_round_trip_on_prototype() -> None:
    layout = bundled_layout("prototype_92")
    cells = build_cells(layout.strips)
    plan = build_plan(cells, layout.strips)
    assert plan.n_mandatory == 92
    values = np.random.default_rng(11).uniform(0.5, 2.0, 92)
    result = decode(plan, simulate_measurements(plan, values))
    assert np.max(np.abs(result.cells - values) / values) < 1e-9
    assert result.residual < 1e-9


def test_decode_zero_and_batches(grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = build_plan(cells, layout.strips)
    result = decode(plan, np.zeros(plan.n_rows))
    np.testing.assert_array_equal(result.cells, np.zeros(6))
    assert result.residual == 0.0
    frames = np.random.default_rng(2).uniform(0.5, 2.0, (4, 6))
    batch = decode(plan, simulate_measurements(plan, frames))
    np.testing.assert_allclose(batch.cells, frames, rtol=1e-9)
    assert batch.residual.shape == (4,)


def test_decode_rejects_bad_input(grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = build_plan(cells, layout.strips)
    with pytest.raises(ValueError, match="Expected"):
        decode(plan, np.ones(plan.n_rows + 1))
    bad = np.ones(plan.n_rows)
    bad[0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        decode(plan, bad)
    with pytest.raises(ValueError, match="Expected"):
        simulate_measurements(plan, np.ones(5))


def test_extra_rows_reduce_noise() -> None:
    layout = grid_layout(3, 3)
    cells = build_cells(layout.strips)
    full = build_plan(cells, layout.strips)
    mandatory = full.mandatory_only()
    assert full.n_rows > mandatory.n_rows == 9
    rng = np.random.default_rng(5)
    values = rng.uniform(0.5, 2.0, (1000, 9))

    def rmse(plan) -> float:
        noisy = simulate_measurements(plan, values, noise_sigma=0.01, rng=rng)
        return float(np.sqrt(np.mean((decode(plan, noisy).cells - values) ** 2)))

    assert rmse(full) < rmse(mandatory)


def test_timer_conversion() -> None:
    timer = TimerConfig()
    assert frequency_to_capacitance(timer, 25.583e3) == pytest.approx(100e-12, rel=1e-3)
    frequencies = np.logspace(3, 6, 50)
    back = capacitance_to_frequency(timer, frequency_to_capacitance(timer, frequencies))
    np.testing.assert_allclose(back, frequencies, rtol=1e-12)


def test_open_channel_reads_zero() -> None:
    timer = TimerConfig(parasitic=20e-12)
    assert frequency_to_capacitance(timer, capacitance_to_frequency(timer, 0.0)) == 0.0
    with pytest.raises(ValueError, match="parasitic"):
        frequency_to_capacitance(timer, 2.0 * capacitance_to_frequency(timer, 0.0))
    with pytest.raises(ValueError):
        frequency_to_capacitance(timer, 0.0)


def test_frame_budget(grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = build_plan(cells, layout.strips)
    budget = estimate_frame_budget(plan, TimerConfig(), [c.rest_capacitance for c in cells])
    assert budget.row_times.shape == (plan.n_rows,)
    assert budget.frame_time == pytest.approx(budget.row_times.sum())
    assert budget.meets(30.0)
    assert not budget.meets(1e9)


def test_plan_round_trip(tmp_path: Path, grid_3x2) -> None:
    layout, cells = grid_3x2
    plan = with_convention(build_plan(cells, layout.strips, layout_hash="abc"), Convention.FARAD)
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    loaded = load_plan(path)
    np.testing.assert_array_equal(loaded.matrix, plan.matrix)
    assert loaded.source_sets == plan.source_sets
    assert loaded.row_kind == plan.row_kind
    assert loaded.cell_keys == plan.cell_keys
    assert loaded.layout_hash == "abc"
    assert loaded.convention == Convention.FARAD
    with pytest.raises(FileNotFoundError):
        load_plan(tmp_path / "missing.json")


def test_frequency_csv(tmp_path: Path) -> None:
    frequencies = np.random.default_rng(4).uniform(1e4, 1e5, (3, 4))
    path = tmp_path / "raw.csv"
    write_frequency_csv(path, frequencies)
    frames, loaded = read_frequency_csv(path)
    np.testing.assert_array_equal(frames, np.arange(3))
    np.testing.assert_array_equal(loaded, frequencies)
    path.write_text("frame,row_0_freq_hz\n0,1000\n1,x\n")
    with pytest.raises(MalformedCaptureError) as excinfo:
        read_frequency_csv(path)
    assert excinfo.value.line_numbers == (3,)
