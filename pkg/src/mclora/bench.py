"""Wall-clock benchmarks for the samplers and the noise buffer."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .samplers import (
    DirichletPrior,
    NoiseBuffer,
    NoiseShape,
    WishartPrior,
    sample_dirichlet,
    sample_gaussian_matrix,
    sample_wishart,
)

BENCH_COLUMNS = ("op", "p", "n_in", "N", "reps", "median_ms")


@dataclass
class BenchRecord:
    op: str
    p: int
    n_in: int
    N: int
    reps: int
    median_ms: float


def median_time(fn, reps: int = 20, warmup: int = 3) -> float:
    """Median wall time of ``fn()`` in milliseconds after discarding warmup calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return 1e3 * float(np.median(times))


def _wishart_case(p: int, rng):
    prior = WishartPrior(np.ones(p), p)
    noise = rng.standard_normal((p, p))
    return lambda: sample_wishart(prior, noise)


def _gaussian_case(p: int, n_in: int, rng):
    mean = np.zeros((n_in, p))
    chol = np.linalg.cholesky(np.eye(p) + 0.1 * np.ones((p, p)))
    noise = rng.standard_normal((n_in, p))
    return lambda: sample_gaussian_matrix(mean, chol, noise)


def _dirichlet_case(n: int, rng):
    prior = DirichletPrior(np.ones(n))
    uniforms = rng.random(n)
    return lambda: sample_dirichlet(prior, uniforms)


def fresh_noise(shape: NoiseShape, rng: np.random.Generator):
    """One base-noise record generated on demand, the unbuffered baseline."""
    p, q, dof, n = shape
    return rng.standard_normal((dof, p)), rng.standard_normal((n, q, p)), rng.random(n)


def _lookup_batch(buf: NoiseBuffer) -> float:
    """Seconds per lookup for the ``capacity - 1`` lookups that follow a forced refill."""
    while buf.cursor < buf.capacity and buf.refills:
        buf.next()
    held = [buf.next()]  # triggers the refill
    start = time.perf_counter()
    for _ in range(buf.capacity - 1):
        held.append(buf.next())
    elapsed = time.perf_counter() - start
    del held  # free the refill arrays outside the timer
    return elapsed / (buf.capacity - 1)


def buffer_lookup_ms(shape: NoiseShape, reps: int = 20, capacity: int = 15, amortized: bool = False) -> float:
    """Median time per ``next()`` call.

    By default the refill is forced outside the timer and the remaining
    ``capacity - 1`` lookups are timed as one batch. Returned records are held
    until the timer stops so that freeing the previous refill (a cost that
    grows with p) is not charged to a lookup. With ``amortized`` the refill is
    inside the timer, spread over the ``capacity`` lookups it serves.
    """
    return lookup_times([shape], reps, capacity, amortized)[0]


def lookup_times(shapes, reps: int = 20, capacity: int = 15, amortized: bool = False, warmup: int = 3) -> list:
    """``buffer_lookup_ms`` for several shapes, interleaved within every rep."""
    if capacity < 2 and not amortized:
        raise ValueError("plain lookup timing needs capacity >= 2")
    bufs = [NoiseBuffer(shape, seed=0, capacity=capacity) for shape in shapes]
    samples = [[] for _ in bufs]
    for rep in range(warmup + reps):
        for i, buf in enumerate(bufs):
            if amortized:
                start = time.perf_counter()
                for _ in range(capacity):
                    buf.next()
                elapsed = (time.perf_counter() - start) / capacity
            else:
                elapsed = _lookup_batch(buf)
            if rep >= warmup:
                samples[i].append(elapsed)
    return [1e3 * float(np.median(s)) for s in samples]


def bench_sampling(dims, reps: int = 20, warmup: int = 3, ops=("wishart", "gaussian", "dirichlet", "lookup", "fresh"),
                   seed: int = 0) -> list:
    """Median timings for every (p, n_in, N) triple, pinned to one BLAS thread."""
    rng = np.random.default_rng(seed)
    records = []
    with threadpool_limits(limits=1), T.no_grad():
        for p, n_in, n in dims:
            shape = NoiseShape(p, n_in, p, n)
            cases = {
                "wishart": lambda: median_time(_wishart_case(p, rng), reps, warmup),
                "gaussian": lambda: median_time(_gaussian_case(p, n_in, rng), reps, warmup),
                "dirichlet": lambda: median_time(_dirichlet_case(n, rng), reps, warmup),
                "lookup": lambda: buffer_lookup_ms(shape, reps),
                "lookup_amortized": lambda: buffer_lookup_ms(shape, reps, amortized=True),
                "fresh": lambda: median_time(lambda: fresh_noise(shape, rng), reps, warmup),
            }
            for op in ops:
                records.append(BenchRecord(op, p, n_in, n, reps, cases[op]()))
    return records


def fit_exponent(sizes, times) -> float:
    """Slope of log(time) against log(size)."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def write_bench_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))
    return path


# Sizes where the per-element work dominates the fixed Python overhead. The
# Dirichlet sizes stay near L2: beyond ~2^16 floats the per-element time
# jumps with cache misses and page faults, which is not the algorithmic cost.
def interleaved_times(cases: list, reps: int = 20, warmup: int = 3, inner: int = 1) -> list:
    """Median ms per call for each case, cycling through the cases within every rep.

    Interleaving spreads slow drifts in machine load evenly over all sizes, so
    they cancel in a scaling fit instead of bending it. One untimed call before
    each timed batch keeps a case from being timed with a cache the previous
    (larger) case has just evicted.
    """
    samples = [[] for _ in cases]
    for rep in range(warmup + reps):
        for i, fn in enumerate(cases):
            fn()
            start = time.perf_counter()
            for _ in range(inner):
                fn()
            if rep >= warmup:
                samples[i].append((time.perf_counter() - start) / inner)
    return [1e3 * float(np.median(s)) for s in samples]


# Sizes where the per-element work dominates the fixed Python overhead. The
# Dirichlet sizes stay near L2: beyond ~2^16 floats the per-element time
# jumps with cache misses and page faults, which is not the algorithmic cost.
GAUSSIAN_RANKS = (64, 128, 256, 512)
GAUSSIAN_N_IN = 1024
DIRICHLET_SIZES = (2 ** 14, 2 ** 15, 2 ** 16)
LOOKUP_PS = (8, 16, 32, 64)
BUFFER_CASE = (32, 256, 4)  # p, n_in, N
MIN_REPS = 20


def bench_summary(out_dir, quick: bool = False, seed: int = 0) -> dict:
    """Run the scaling and buffer benchmarks, write bench.csv, return the headline numbers.

    ``quick`` lowers the inner batch sizes; the rep count stays at 20.
    """
    reps = MIN_REPS if quick else 2 * MIN_REPS
    rng = np.random.default_rng(seed)
    records = []
    with threadpool_limits(limits=1), T.no_grad():
        gauss = interleaved_times([_gaussian_case(r, GAUSSIAN_N_IN, rng) for r in GAUSSIAN_RANKS], reps)
        records += [BenchRecord("gaussian", r, GAUSSIAN_N_IN, 4, reps, t) for r, t in zip(GAUSSIAN_RANKS, gauss)]
        inner = 5 if quick else 20
        dirichlet = interleaved_times([_dirichlet_case(m, rng) for m in DIRICHLET_SIZES], reps, inner=inner)
        records += [BenchRecord("dirichlet", 4, 16, m, reps, t) for m, t in zip(DIRICHLET_SIZES, dirichlet)]
        lookups = lookup_times([NoiseShape(p, BUFFER_CASE[1], p, BUFFER_CASE[2]) for p in LOOKUP_PS], 5 * reps)
        records += [BenchRecord("lookup", p, BUFFER_CASE[1], BUFFER_CASE[2], 5 * reps, t)
                    for p, t in zip(LOOKUP_PS, lookups)]
    p, n_in, n = BUFFER_CASE
    records += bench_sampling([(p, n_in, n)], reps, ops=("lookup_amortized", "fresh"), seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(records, out / "bench.csv")

    fresh = next(r.median_ms for r in records if r.op == "fresh")
    amortized = next(r.median_ms for r in records if r.op == "lookup_amortized")
    lookup = lookups[LOOKUP_PS.index(p)]
    return {
        "gaussian_rank_exponent": fit_exponent(GAUSSIAN_RANKS, gauss),
        "dirichlet_n_exponent": fit_exponent(DIRICHLET_SIZES, dirichlet),
        "lookup_p_exponent": fit_exponent(LOOKUP_PS, lookups),
        "lookup_speedup": fresh / lookup,
        "amortized_speedup": fresh / amortized,
    }
