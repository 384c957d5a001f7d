import csv

import numpy as np
import pytest

from mclora.bench import BENCH_COLUMNS, bench_sampling, fit_exponent, interleaved_times, write_bench_csv


def test_fit_exponent_recovers_power_law():
    sizes = np.array([8, 16, 32, 64])
    assert fit_exponent(sizes, 3e-4 * sizes ** 2.0) == pytest.approx(2.0)
    assert fit_exponent(sizes, np.full(4, 0.7)) == pytest.approx(0.0, abs=1e-12)


def test_interleaved_times_shape():
    calls = []
    times = interleaved_times([lambda: calls.append(0), lambda: calls.append(1)], reps=5, warmup=2)
    assert len(times) == 2 and all(t >= 0 for t in times)
    assert calls.count(0) == calls.count(1) >= 5


def test_bench_records_and_csv(tmp_path):
    records = bench_sampling([(4, 16, 2)], reps=3)
    assert {r.op for r in records} == {"wishart", "gaussian", "dirichlet", "lookup", "fresh"}
    path = write_bench_csv(records, tmp_path / "bench.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == BENCH_COLUMNS
    assert len(rows) == len(records)
