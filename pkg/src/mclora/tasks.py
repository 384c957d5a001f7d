"""Synthetic classification tasks with a controllable distribution shift.

``cluster``: K Gaussian clusters whose means sit on a circle in a random 2-D
plane of R^dim. Adjacent means are ``separation`` noise widths apart, and the
``shift`` angle rotates every mean inside that plane.

``parity``: binary token sequences; the label is the XOR of the first
``parity_window`` bits. Each token is a 2-D unit vector at angle
``pi * bit + shift`` (plus noise) followed by sinusoidal position codes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .samplers import seed_sequence

KINDS = ("cluster", "parity")


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "cluster"
    dim: int = 16
    n_classes: int = 4
    seed: int = 0
    shift: float = 0.0
    noise: float = 1.0
    separation: float = 6.0  # distance between adjacent means, in noise widths
    seq_len: int = 16
    parity_window: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task kind must be one of {list(KINDS)}, got {self.kind!r}", "kind")
        if self.kind == "cluster" and self.n_classes < 2:
            raise ConfigError("cluster task needs at least 2 classes", "n_classes")
        if self.kind == "parity" and not 1 <= self.parity_window <= self.seq_len:
            raise ConfigError("parity_window must lie in [1, seq_len]", "parity_window")
        if self.kind == "parity" and self.dim < 4:
            raise ConfigError("parity tokens need dim >= 4", "dim")

    @property
    def classes(self) -> int:
        return 2 if self.kind == "parity" else self.n_classes

    @property
    def input_shape(self) -> tuple:
        return (self.seq_len, self.dim) if self.kind == "parity" else (self.dim,)

    def shifted(self, shift: float) -> "SyntheticTask":
        return SyntheticTask(**{**asdict(self), "shift": float(shift)})


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ContractError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, index) -> "Dataset":
        return Dataset(self.x[index], self.y[index])


@dataclass
class TaskData:
    task: SyntheticTask
    train: Dataset
    val: Dataset


def cluster_geometry(task: SyntheticTask) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal plane basis (dim, 2) and the K class means (K, dim)."""
    rng = np.random.default_rng(seed_sequence(task.seed, 0))
    basis, _ = np.linalg.qr(rng.standard_normal((task.dim, 2)))
    k = task.n_classes
    radius = task.separation * task.noise / (2.0 * math.sin(math.pi / k))
    angles = 2.0 * math.pi * np.arange(k) / k + task.shift
    plane = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return basis, plane @ basis.T


def _cluster_split(task: SyntheticTask, n: int, stream: int) -> Dataset:
    _, means = cluster_geometry(task)
    rng = np.random.default_rng(seed_sequence(task.seed, stream))
    y = rng.integers(0, task.n_classes, size=n)
    x = means[y] + task.noise * rng.standard_normal((n, task.dim))
    return Dataset(x, y.astype(np.int64))


def position_codes(seq_len: int, width: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    freqs = 1.0 / (seq_len ** (np.arange(width // 2) / max(width // 2, 1)))
    codes = np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=1)
    return codes[:, :width] if codes.shape[1] >= width else np.pad(codes, ((0, 0), (0, width - codes.shape[1])))


def _parity_split(task: SyntheticTask, n: int, stream: int) -> Dataset:
    rng = np.random.default_rng(seed_sequence(task.seed, stream))
    bits = rng.integers(0, 2, size=(n, task.seq_len))
    y = np.bitwise_xor.reduce(bits[:, : task.parity_window], axis=1)
    angle = math.pi * bits + task.shift
    tokens = np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    tokens = tokens + 0.1 * task.noise * rng.standard_normal(tokens.shape)
    codes = np.broadcast_to(position_codes(task.seq_len, task.dim - 2), (n, task.seq_len, task.dim - 2))
    return Dataset(np.concatenate([tokens, codes], axis=-1), y.astype(np.int64))


def generate_task(task: SyntheticTask, n_train: int, n_val: int) -> TaskData:
    """Deterministic train/validation splits drawn from separate seed substreams."""
    if n_train <= 0 or n_val <= 0:
        raise ContractError("n_train and n_val must be positive")
    make = _cluster_split if task.kind == "cluster" else _parity_split
    return TaskData(task, make(task, n_train, 1), make(task, n_val, 2))


def bayes_predict(task: SyntheticTask, x: np.ndarray) -> np.ndarray:
    """Bayes-optimal labels for the cluster task (equal priors, isotropic noise)."""
    if task.kind != "cluster":
        raise ConfigError("bayes_predict is only defined for the cluster task", "kind")
    _, means = cluster_geometry(task)
    dist = ((x[:, None, :] - means[None]) ** 2).sum(-1)
    return np.argmin(dist, axis=1)


def export_dataset(data: Dataset, path) -> Path:
    """Columnar text: a shape comment, a header line, then one row per example."""
    path = Path(path)
    flat = data.x.reshape(len(data), -1)
    header = "label," + ",".join(f"f{i}" for i in range(flat.shape[1]))
    shape = "x".join(str(s) for s in data.x.shape[1:])
    rows = np.column_stack([data.y, flat])
    with open(path, "w") as fh:
        fh.write(f"# shape={shape}\n{header}\n")
        np.savetxt(fh, rows, delimiter=",", fmt="%.17g")
    return path


def import_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        shape_line = fh.readline().strip()
    feature_shape = tuple(int(s) for s in shape_line.split("=", 1)[1].split("x"))
    rows = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return Dataset(rows[:, 1:].reshape((len(rows),) + feature_shape), rows[:, 0].astype(np.int64))
