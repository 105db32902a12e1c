"""Seeded synthetic tasks and CSV ingestion.

Datasets store examples as columns: ``inputs`` is ``(d, n)`` and
``targets`` is ``(m, n)`` for regression or an integer label vector of
length ``n`` for classification.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError, RankError
from .nnmodel import Batch


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        t = np.asarray(self.targets)
        self.targets = t.astype(np.intp) if (t.ndim == 1 and np.issubdtype(t.dtype, np.integer)) else t.astype(np.float64)
        if self.inputs.ndim != 2 or self.targets.shape[-1] != self.inputs.shape[1]:
            raise DataError(f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree on n")

    @property
    def size(self):
        return self.inputs.shape[1]

    @property
    def is_classification(self):
        return self.targets.ndim == 1

    def batch(self, idx=None):
        if idx is None:
            return Batch(self.inputs, self.targets)
        return Batch(self.inputs[:, idx], self.targets[..., idx])

    def split(self, val_fraction, seed=0):
        """Seeded shuffle-split into ``(train, val)``."""
        if not 0 < val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        n = self.size
        n_val = min(max(1, int(round(n * val_fraction))), n - 1)
        order = np.random.default_rng(seed).permutation(n)
        va, tr = order[:n_val], order[n_val:]
        return (Dataset(self.inputs[:, tr], self.targets[..., tr]),
                Dataset(self.inputs[:, va], self.targets[..., va]))


@dataclass
class TeacherStudent:
    """Hidden parameters of a teacher-student task."""

    W_pt: np.ndarray
    delta: np.ndarray
    noise: float


def _split_sizes(n, val_fraction):
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    return n - n_val, n_val


def gen_teacher_student(m, d, k, n, noise=0.0, seed=0, val_fraction=0.2):
    """Regression task ``y = (W_pt + delta) x + noise * xi``.

    ``x`` and ``xi`` are standard normal; ``delta`` has exact rank ``k`` and
    unit Frobenius norm (zero when ``k == 0``). A learner starts from ``W_pt``.
    Returns ``(train, val, hidden)``.
    """
    if not 0 <= k <= min(m, d):
        raise RankError(f"target rank {k} outside [0, {min(m, d)}]")
    if n < 2:
        raise ValueError("need n >= 2 examples")
    rng = np.random.default_rng(seed)
    W_pt = rng.standard_normal((m, d)) / math.sqrt(d)
    if k:
        Uq = np.linalg.qr(rng.standard_normal((m, k)))[0]
        Vq = np.linalg.qr(rng.standard_normal((d, k)))[0]
        s = np.sort(rng.uniform(0.5, 1.5, size=k))[::-1]
        delta = (Uq * s) @ Vq.T
        delta /= np.linalg.norm(delta)
    else:
        delta = np.zeros((m, d))
    X = rng.standard_normal((d, n))
    Y = (W_pt + delta) @ X + noise * rng.standard_normal((m, n))
    n_train, _ = _split_sizes(n, val_fraction)
    train = Dataset(X[:, :n_train], Y[:, :n_train])
    val = Dataset(X[:, n_train:], Y[:, n_train:])
    return train, val, TeacherStudent(W_pt, delta, noise)


def gen_blobs(classes, d, n, separation=3.0, seed=0, val_fraction=0.2):
    """Isotropic Gaussian clusters with labels assigned round-robin (stratified).

    Class centres are random unit directions scaled by ``separation``.
    Returns ``(train, val)``; with ``val_fraction=None`` returns the full set
    as ``(data, None)``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < 2:
        raise ValueError("need n >= 2 examples")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((d, classes))
    centres *= separation / np.linalg.norm(centres, axis=0)
    labels = np.arange(n) % classes
    X = centres[:, labels] + rng.standard_normal((d, n))
    data = Dataset(X, labels)
    if val_fraction is None:
        return data, None
    return data.split(val_fraction, seed)


def gen_spirals(n, turns=1.5, noise=0.1, seed=0, val_fraction=0.2):
    """Two interleaved 2-D spirals with binary labels."""
    if n < 2:
        raise ValueError("need n >= 2 examples")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    t = rng.uniform(0.25, 1.0, size=n) * turns * 2 * np.pi
    radius = t / (turns * 2 * np.pi)
    angle = t + np.pi * labels
    X = np.vstack([radius * np.cos(angle), radius * np.sin(angle)]) + noise * rng.standard_normal((2, n))
    data = Dataset(X, labels)
    if val_fraction is None:
        return data, None
    return data.split(val_fraction, seed)


def load_csv(path, target_columns, as_labels=False):
    """Read a numeric CSV with a header row; returns a :class:`Dataset`.

    ``target_columns`` is a column name or a list of names; rows are kept in
    file order. With ``as_labels`` the single target column becomes an
    integer label vector.
    """
    if isinstance(target_columns, str):
        target_columns = [target_columns]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, header row required", line=1) from None
        header = [h.strip() for h in header]
        for col in target_columns:
            if col not in header:
                raise ParseError(f"target column {col!r} not in header {header}", line=1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line)
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise ParseError(f"non-numeric cell {bad!r}", line=line) from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise DataError(f"{path}: non-finite values")
    tidx = [header.index(c) for c in target_columns]
    fidx = [i for i in range(len(header)) if i not in tidx]
    X = table[:, fidx].T.copy()
    Y = table[:, tidx].T.copy()
    if as_labels:
        if len(tidx) != 1 or not np.all(Y == np.round(Y)):
            raise ParseError(f"label column {target_columns} must be a single integer column")
        return Dataset(X, Y[0].astype(np.intp))
    return Dataset(X, Y)


def save_csv(path, data, feature_names=None, target_names=None):
    """Write ``data`` with a header; floats are written with ``repr`` so they round-trip."""
    d = data.inputs.shape[0]
    feature_names = feature_names or [f"x{i}" for i in range(d)]
    T = data.targets[None, :] if data.is_classification else data.targets
    if target_names is None:
        target_names = ["label"] if data.is_classification else [f"y{i}" for i in range(T.shape[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(feature_names) + list(target_names))
        for j in range(data.size):
            w.writerow([repr(float(v)) for v in data.inputs[:, j]] + [repr(float(v)) for v in T[:, j]])


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


@dataclass
class DatasetSpec:
    kind: str = "teacher_student"
    m: int = 64
    d: int = 64
    k: int = 4
    n: int = 2048
    noise: float = 0.01
    seed: int = 0
    val_fraction: float = 0.2
    classes: int = 3
    separation: float = 3.0
    path: str | None = None
    target: str | list | None = None
    labels: bool = False

    def __post_init__(self):
        if self.kind not in ("teacher_student", "blobs", "spirals", "csv"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def build(self):
        """Returns ``(train, val, hidden)``; ``hidden`` is None except for teacher-student."""
        if self.kind == "teacher_student":
            return gen_teacher_student(self.m, self.d, self.k, self.n, self.noise, self.seed, self.val_fraction)
        if self.kind == "blobs":
            return (*gen_blobs(self.classes, self.d, self.n, self.separation, self.seed, self.val_fraction), None)
        if self.kind == "spirals":
            return (*gen_spirals(self.n, noise=self.noise, seed=self.seed, val_fraction=self.val_fraction), None)
        if self.path is None or self.target is None:
            raise ValueError("csv datasets need path and target")
        return (*load_csv(self.path, self.target, self.labels).split(self.val_fraction, self.seed), None)
