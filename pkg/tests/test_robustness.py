import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mclora.errors import ContractError, DegenerateTestError
from mclora.robustness import extrinsic_robustness, intrinsic_robustness, spread, wilcoxon_signed_rank
from mclora.sweep import SweepGrid, build_cell_model, emit_report, grid_cells, prepare, run_sweep
from mclora.trainer import TrainConfig, train


def test_spread_examples():
    assert spread([80, 85, 90]) == 10
    assert spread([72.5]) == 0
    with pytest.raises(ContractError):
        spread([])


def test_robustness_examples():
    assert intrinsic_robustness([0.5, 0.4, 0.6]) == pytest.approx(2.0)
    assert intrinsic_robustness([0.4, 0.6]) == pytest.approx(2.0)
    assert intrinsic_robustness([0.25] * 3) == pytest.approx(4.0)
    assert extrinsic_robustness([80, 85, 90]) == 85
    assert extrinsic_robustness([70, 90]) == 80
    assert extrinsic_robustness([61.0]) == 61.0
    with pytest.raises(ContractError):
        intrinsic_robustness([0.0, -1.0, 0.0])


scores = st.lists(st.floats(0.01, 100.0), min_size=1, max_size=20)


@settings(max_examples=100, deadline=None)
@given(scores, st.randoms(use_true_random=False), st.floats(0.1, 10.0))
def test_statistics_permutation_and_homogeneity(values, rnd, c):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert spread(shuffled) == spread(values)
    assert extrinsic_robustness(shuffled) == extrinsic_robustness(values)
    assert intrinsic_robustness(shuffled) == intrinsic_robustness(values)
    assert extrinsic_robustness([c * v for v in values]) == pytest.approx(c * extrinsic_robustness(values))


def test_wilcoxon_examples():
    res = wilcoxon_signed_rank([1, 2, 3], alternative="greater")
    assert res.pvalue == 0.125 and res.statistic == 6 and res.method == "exact"
    with pytest.raises(DegenerateTestError):
        wilcoxon_signed_rank([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        wilcoxon_signed_rank([1.0, 2.0], [1.0])


def test_wilcoxon_matches_scipy_exact():
    rng = np.random.default_rng(0)
    for n in range(3, 12):
        d = rng.normal(size=n)
        for alternative in ("two-sided", "greater", "less"):
            ours = wilcoxon_signed_rank(d, alternative=alternative).pvalue
            ref = stats.wilcoxon(d, alternative=alternative, method="exact").pvalue
            assert ours == pytest.approx(ref, abs=1e-12)


def test_normal_approximation_near_enumeration_at_13():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d = rng.normal(size=13)
        for alternative in ("two-sided", "greater", "less"):
            exact = wilcoxon_signed_rank(d, alternative=alternative, exact=True).pvalue
            approx = wilcoxon_signed_rank(d, alternative=alternative)
            assert approx.method == "normal"
            assert abs(exact - approx.pvalue) <= 0.02


@pytest.fixture(scope="module")
def small_grid():
    return SweepGrid(learning_rates=(0.3, 0.1), batch_sizes=(16,), seeds=(0, 1), steps=10, pretrain_steps=50,
                     pretrain_samples=400, n_val=200)


@pytest.fixture(scope="module")
def prepared(small_grid):
    return prepare(small_grid)


def test_sweep_cardinality_and_direct_equivalence(small_grid, prepared):
    records = run_sweep(small_grid, prepared=prepared)
    assert len(records) == 2 * 2 * 2
    cell = grid_cells(small_grid)[0]
    direct = train(build_cell_model(small_grid, prepared.base, cell), prepared.target,
                   TrainConfig(learning_rate=cell.learning_rate, batch_size=cell.batch_size, steps=small_grid.steps,
                               optimizer=small_grid.optimizer, seed=cell.seed))
    assert direct.losses == records[0].losses and direct.val_acc == records[0].val_acc


def test_sweep_order_independence(small_grid, prepared):
    cells = grid_cells(small_grid)
    forward = run_sweep(small_grid, prepared=prepared, cells=cells)
    backward = run_sweep(small_grid, prepared=prepared, cells=cells[::-1])
    assert [r.to_json() for r in forward] == [r.to_json() for r in backward[::-1]]


def test_sweep_resume_and_report(small_grid, prepared, tmp_path):
    first = run_sweep(small_grid, tmp_path, prepared=prepared)
    second = run_sweep(small_grid, tmp_path, prepared=prepared)
    assert (first.trained, second.trained, second.skipped) == (8, 0, 8)
    assert [r.to_json() for r in first] == [r.to_json() for r in second]

    paths = emit_report(second, tmp_path, plots=True)
    with open(paths["csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(second)
    report = json.loads(paths["report"].read_text())
    for strategy, summary in report["strategies"].items():
        accs = [float(r["val_acc"]) for r in rows if r["strategy"] == strategy]
        assert summary["median"] == pytest.approx(np.median(accs))
    assert any(p.suffix == ".png" for p in (tmp_path / "plots").iterdir())


def test_failed_cell_does_not_stop_sweep(small_grid, prepared):
    grid = replace(small_grid, rank=10_000)
    records = run_sweep(grid, prepared=prepared)
    assert records.failed == len(records) == 8
    assert "ConfigError" in records[0].error
