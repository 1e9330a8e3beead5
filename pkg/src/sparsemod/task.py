"""Sparse modular addition: data, targets, and the prefix invariance classes."""
import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidToken, SuffixLengthMismatch
from .seeding import stream


@dataclass(frozen=True)
class TaskSpec:
    """Sequences of ``L`` tokens in ``[0, p)``; the label is the sum of the first ``k`` mod ``p``."""

    L: int = 12
    k: int = 5
    p: int = 2

    def __post_init__(self):
        if not 0 <= self.k <= self.L:
            raise ValueError(f"need 0 <= k <= L, got k={self.k}, L={self.L}")
        if self.p < 2:
            raise ValueError(f"need p >= 2, got p={self.p}")


def _check_tokens(x, spec):
    x = np.asarray(x)
    if x.shape[-1] != spec.L:
        raise InvalidToken(f"sequence length {x.shape[-1]} != L={spec.L}")
    if np.any(x < 0) or np.any(x >= spec.p):
        raise InvalidToken(f"tokens must lie in [0, {spec.p})")
    return x


def target(x, spec):
    x = _check_tokens(x, spec)
    return int(np.sum(x[: spec.k]) % spec.p)


def targets(xs, spec):
    """Vectorised :func:`target` over the rows of an ``(n, L)`` array."""
    xs = _check_tokens(np.atleast_2d(xs), spec)
    return (xs[:, : spec.k].sum(axis=1) % spec.p).astype(np.int64)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    spec: TaskSpec
    seed: int = 0

    def __post_init__(self):
        self.inputs.setflags(write=False)
        self.targets.setflags(write=False)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx):
        return Dataset(np.array(self.inputs[idx]), np.array(self.targets[idx]), self.spec, self.seed)


def make_dataset(inputs, spec, seed=0):
    inputs = np.ascontiguousarray(inputs, dtype=np.int64)
    return Dataset(inputs, targets(inputs, spec), spec, seed)


def sample_dataset(n, spec, seed, purpose="data"):
    """Draw ``n`` sequences uniformly with replacement from all ``p**L`` sentences."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(seed, purpose)
    inputs = rng.integers(0, spec.p, size=(n, spec.L), dtype=np.int64)
    return make_dataset(inputs, spec, seed)


def prefix_class(x, spec):
    """Token counts over positions ``1..k``; the task's invariance class."""
    x = _check_tokens(x, spec)
    return tuple(int(c) for c in np.bincount(x[: spec.k], minlength=spec.p))


def ideal_cluster_count(spec):
    # stars and bars: k stars, p - 1 bars
    return math.comb(spec.k + spec.p - 1, spec.k)


def default_suffixes(spec):
    """All zeros, all ``p - 1``, and alternating ``0, p-1, 0, ...``."""
    m = spec.L - spec.k
    return [
        (0,) * m,
        (spec.p - 1,) * m,
        tuple(0 if i % 2 == 0 else spec.p - 1 for i in range(m)),
    ]


@dataclass(frozen=True)
class ProbeSet:
    inputs: np.ndarray
    classes: list = field(default_factory=list)
    targets: np.ndarray = None
    spec: TaskSpec = None

    def __len__(self):
        return len(self.inputs)

    def class_index(self):
        """Integer label per sequence; classes numbered by first appearance."""
        seen = {}
        return np.array([seen.setdefault(c, len(seen)) for c in self.classes], dtype=np.int64)


def build_probe_set(spec, suffixes=None):
    """All ``p**k`` prefixes crossed with ``suffixes``, prefix-major lexicographic order."""
    if suffixes is None:
        suffixes = default_suffixes(spec)
    suffixes = [tuple(s) for s in suffixes]
    for s in suffixes:
        if len(s) != spec.L - spec.k:
            raise SuffixLengthMismatch(f"suffix {s} has length {len(s)}, expected {spec.L - spec.k}")
        if any(not 0 <= t < spec.p for t in s):
            raise InvalidToken(f"suffix {s} has tokens outside [0, {spec.p})")
    rows = [
        prefix + suffix
        for prefix in itertools.product(range(spec.p), repeat=spec.k)
        for suffix in suffixes
    ]
    inputs = np.array(rows, dtype=np.int64).reshape(len(rows), spec.L)
    classes = [prefix_class(r, spec) for r in inputs]
    return ProbeSet(inputs, classes, targets(inputs, spec) if len(rows) else np.zeros(0, np.int64), spec)


def write_csv(dataset, path):
    L = dataset.spec.L
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{t + 1}" for t in range(L)] + ["y"])
        for x, y in zip(dataset.inputs, dataset.targets):
            w.writerow([*map(int, x), int(y)])


def read_csv(path, spec, seed=0):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if len(header) != spec.L + 1:
            raise ValueError(f"expected {spec.L + 1} columns, found {len(header)}")
        rows = [list(map(int, row)) for row in r if row]
    arr = np.array(rows, dtype=np.int64).reshape(-1, spec.L + 1)
    ds = make_dataset(arr[:, : spec.L], spec, seed)
    if not np.array_equal(ds.targets, arr[:, spec.L]):
        raise ValueError("target column disagrees with the task's labels")
    return ds
