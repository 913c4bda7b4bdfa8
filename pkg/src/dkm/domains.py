"""Synthetic domains, episodic sampling, pseudo-unseen mixing, and EMD.

A domain draws each sample as ``scale * (R @ (prototype + sigma * g)) + shift``
with ``R`` orthogonal. Target domains reuse the source's prototype
distribution but rotate and rescale it, so the class-carrying directions of
the source land elsewhere in the target.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .rng import derive_seed, make_rng

EMD_CAP = 64


@dataclass(frozen=True)
class DomainSpec:
    prototypes: np.ndarray
    sigma_class: float
    rotation: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    label_offset: int = 0
    name: str = "domain"

    def __post_init__(self) -> None:
        d = self.prototypes.shape[1]
        if self.sigma_class < 0:
            raise ValueError("sigma_class must be nonnegative")
        if self.rotation.shape != (d, d):
            raise ValueError(f"rotation must be {d}x{d}, got {self.rotation.shape}")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(d), atol=1e-9):
            raise ValueError("rotation must be orthogonal")
        if self.scale.shape != (d,) or self.shift.shape != (d,):
            raise ValueError("scale and shift must be vectors of the input width")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def in_dim(self) -> int:
        return self.prototypes.shape[1]

    def transform(self, v: np.ndarray) -> np.ndarray:
        return (v @ self.rotation.T) * self.scale + self.shift


@dataclass(frozen=True)
class SampleTable:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("table needs x of shape (n, d) and y of shape (n,)")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y)

    def subset(self, classes) -> "SampleTable":
        mask = np.isin(self.y, np.asarray(list(classes)))
        return SampleTable(self.x[mask], self.y[mask])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + [f"x{i}" for i in range(self.x.shape[1])])
            for label, row in zip(self.y, self.x):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SampleTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[0] != "class" or header[1:] != [f"x{i}" for i in range(len(header) - 1)]:
                raise ValueError(f"unexpected header {header}")
            rows = list(reader)
        y = np.array([int(r[0]) for r in rows], dtype=np.int64)
        x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        return cls(x.reshape(len(rows), len(header) - 1), y)


@dataclass(frozen=True)
class DomainStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int
    shot: int
    query: int
    classes: np.ndarray
    support_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)
    domain: str = ""


def synth_dataset(spec: DomainSpec, per_class: int, seed: int) -> SampleTable:
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    rng = make_rng(seed)
    noise = rng.standard_normal((spec.n_classes, per_class, spec.in_dim))
    raw = spec.prototypes[:, None, :] + spec.sigma_class * noise
    x = spec.transform(raw.reshape(-1, spec.in_dim))
    y = np.repeat(np.arange(spec.n_classes) + spec.label_offset, per_class)
    return SampleTable(x, y)


def domain_stats(x: np.ndarray) -> DomainStats:
    """Per-dimension mean and population standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("domain_stats needs at least 2 samples")
    return DomainStats(x.mean(axis=0), x.std(axis=0))


def make_pseudo_unseen(
    x_v: np.ndarray,
    lam: float,
    stats: DomainStats,
    seed: int,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """``x_u = lam * x_v + (1 - lam) * eps`` with ``eps ~ N(mu, sigma^2)`` per element.

    ``noise`` overrides the drawn ``eps`` (used to pin values in tests).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {lam}")
    x_v = np.asarray(x_v, dtype=np.float64)
    if stats.mu.shape != (x_v.shape[1],):
        raise ValueError("stats width does not match samples")
    if noise is None:
        noise = stats.mu + stats.sigma * make_rng(seed).standard_normal(x_v.shape)
    return lam * x_v + (1.0 - lam) * noise


def sample_episode(table: SampleTable, way: int, shot: int, query: int, seed: int, domain: str = "") -> Episode:
    rng = make_rng(seed)
    labels, counts = np.unique(table.y, return_counts=True)
    eligible = labels[counts >= shot + query]
    if len(labels) < way:
        raise ValueError(f"table has {len(labels)} classes, episode needs {way}")
    if len(eligible) < way:
        raise ValueError(f"only {len(eligible)} classes have {shot + query} samples")
    classes = rng.choice(eligible, size=way, replace=False)
    s_idx, q_idx = [], []
    for cls in classes:
        rows = np.flatnonzero(table.y == cls)
        pick = rng.choice(rows, size=shot + query, replace=False)
        s_idx.append(pick[:shot])
        q_idx.append(pick[shot:])
    s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    local = np.arange(way)
    return Episode(
        support_x=table.x[s_idx],
        support_y=np.repeat(local, shot),
        query_x=table.x[q_idx],
        query_y=np.repeat(local, query),
        way=way,
        shot=shot,
        query=query,
        classes=classes,
        support_idx=s_idx,
        query_idx=q_idx,
        domain=domain,
    )


def emd(a: np.ndarray, b: np.ndarray, cap: int = EMD_CAP) -> float:
    """Exact EMD between equal-size point sets with Euclidean ground cost."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"emd needs equal-size sets, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > cap:
        raise ValueError(f"set size {a.shape[0]} exceeds cap {cap}")
    if a.shape[0] == 0:
        return 0.0
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


def emd_brute_force(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum over all permutations; only for tiny sets."""
    cost = cdist(np.atleast_2d(a), np.atleast_2d(b))
    n = cost.shape[0]
    best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return float(best / n)


def sample_emd(x_a: np.ndarray, x_b: np.ndarray, size: int, seed: int) -> float:
    """EMD between random equal-size subsets of two sample sets."""
    rng = make_rng(seed)
    size = min(size, x_a.shape[0], x_b.shape[0])
    ia = rng.choice(x_a.shape[0], size=size, replace=False)
    ib = rng.choice(x_b.shape[0], size=size, replace=False)
    return emd(x_a[ia], x_b[ib], cap=max(size, EMD_CAP))


# rotations and the default benchmark --------------------------------------------

def plane_rotation(dim: int, angle_deg: float, pairs: list[tuple[int, int]] | None = None) -> np.ndarray:
    """Givens rotations by the same angle in disjoint coordinate planes.

    The default pairs dimension i with i + dim//2.
    """
    if pairs is None:
        half = dim // 2
        pairs = [(i, i + half) for i in range(half)]
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    r = np.eye(dim)
    for i, j in pairs:
        r[i, i], r[j, j] = c, c
        r[i, j], r[j, i] = -s, s
    return r


def signal_pairs(signal_dims: int) -> list[tuple[int, int]]:
    """Rotation planes inside the signal subspace, pairing leading with trailing signal axes."""
    half = signal_dims // 2
    return [(i, i + half) for i in range(half)]


def prototype_scales(signal_dims: int, hi: float = 2.0, lo: float = 0.25) -> np.ndarray:
    """Geometrically decaying per-dimension spread of class prototypes."""
    return hi * (lo / hi) ** (np.arange(signal_dims) / max(signal_dims - 1, 1))


def draw_prototypes(n: int, dim: int, seed: int, signal_dims: int | None = None) -> np.ndarray:
    """Prototypes spread over the first ``signal_dims`` axes and zero elsewhere.

    The remaining axes carry only within-class noise, i.e. class-irrelevant
    nuisance variation.
    """
    signal_dims = dim if signal_dims is None else signal_dims
    if not 0 < signal_dims <= dim:
        raise ValueError(f"signal_dims must lie in (0, {dim}]")
    rng = make_rng(seed)
    protos = np.zeros((n, dim))
    protos[:, :signal_dims] = rng.standard_normal((n, signal_dims)) * prototype_scales(signal_dims)
    return protos


@dataclass(frozen=True)
class TargetShift:
    name: str
    angle: float
    scale_jitter: float


@dataclass(frozen=True)
class Benchmark:
    source: DomainSpec
    source_train_classes: np.ndarray
    source_heldout_classes: np.ndarray
    targets: dict[str, DomainSpec]


def make_benchmark(
    seed: int,
    in_dim: int = 16,
    n_train: int = 64,
    n_heldout: int = 16,
    n_target: int = 20,
    sigma_class: float = 1.0,
    signal_dims: int = 8,
    targets: list[TargetShift] | tuple[TargetShift, ...] = (),
) -> Benchmark:
    """Source domain (train + held-out classes) and rotated/scaled targets.

    Targets draw fresh prototypes from the same distribution, then rotate
    within the signal subspace and rescale every axis.
    """
    source = DomainSpec(
        prototypes=draw_prototypes(
            n_train + n_heldout, in_dim, derive_seed(seed, "source-protos"), signal_dims
        ),
        sigma_class=sigma_class,
        rotation=np.eye(in_dim),
        scale=np.ones(in_dim),
        shift=np.zeros(in_dim),
        label_offset=0,
        name="source",
    )
    specs = {}
    for k, shift in enumerate(targets):
        rng = make_rng(derive_seed(seed, "target-scale", k))
        specs[shift.name] = DomainSpec(
            prototypes=draw_prototypes(
                n_target, in_dim, derive_seed(seed, "target-protos", k), signal_dims
            ),
            sigma_class=sigma_class,
            rotation=plane_rotation(in_dim, shift.angle, signal_pairs(signal_dims)),
            scale=np.exp(rng.uniform(-shift.scale_jitter, shift.scale_jitter, size=in_dim)),
            shift=np.zeros(in_dim),
            label_offset=1000 * (k + 1),
            name=shift.name,
        )
    return Benchmark(
        source=source,
        source_train_classes=np.arange(n_train),
        source_heldout_classes=np.arange(n_train, n_train + n_heldout),
        targets=specs,
    )
