"""Encoder, mapping layer, classifiers, and the fusion rule.

Every network is an MLP stored as a :class:`ParamSet` with entries
``w0, b0, w1, b1, ...``; weights are ``(fan_in, fan_out)`` and a layer
computes ``x @ w + b``. Forward functions take a :class:`Graph` plus the
bound parameter nodes so the same code serves training and inference.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Graph, Node, ShapeError
from .rng import make_rng


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered, immutable mapping of parameter name to float64 array."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None) -> None:
        self._items: dict[str, np.ndarray] = {}
        for name, value in (items or {}).items():
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.flags.writeable = False
            self._items[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._items.items())
        return f"ParamSet({shapes})"

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self._items)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        merged = dict(self._items)
        for name, value in updates.items():
            if np.shape(value) != self._items[name].shape:
                raise ShapeError(
                    f"{name}: replacement shape {np.shape(value)} != {self._items[name].shape}"
                )
            merged[name] = value
        return ParamSet(merged)

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    @property
    def n_layers(self) -> int:
        return len(self) // 2

    def layer_sizes(self) -> list[int]:
        sizes = [self["w0"].shape[0]]
        sizes += [self[f"w{i}"].shape[1] for i in range(self.n_layers)]
        return sizes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_mlp(sizes: list[int], seed: int) -> ParamSet:
    """Uniform Glorot weights, zero biases, determined entirely by ``seed``."""
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least input and output sizes")
    if any(int(s) <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = make_rng(seed)
    items: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        a = glorot_bound(fan_in, fan_out)
        items[f"w{i}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
        items[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(items)


@dataclass(frozen=True)
class Arch:
    in_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    mapper_hidden: int = 32
    domain_hidden: int = 32

    def encoder_sizes(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.feature_dim]

    def mapper_sizes(self) -> list[int]:
        return [self.feature_dim, self.mapper_hidden, self.feature_dim]

    def domain_sizes(self) -> list[int]:
        return [self.feature_dim, self.domain_hidden, 1]

    def classifier_sizes(self, n_out: int) -> list[int]:
        return [self.feature_dim, n_out]


def mlp(g: Graph, p: Mapping[str, Node], x: Node) -> Node:
    """Linear layers with relu between them (none after the last)."""
    n = len(p) // 2
    h = x
    for i in range(n):
        w, b = p[f"w{i}"], p[f"b{i}"]
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input width {h.shape[1]} != {w.shape[0]}")
        h = g.add(g.matmul(h, w), b)
        if i < n - 1:
            h = g.relu(h)
    return h


def encode(g: Graph, enc: Mapping[str, Node], x: Node) -> Node:
    """Feature rows ``z = normalize(phi(x))``; zero rows stay zero."""
    return g.l2_normalize(mlp(g, enc, x))


def map_features(g: Graph, mapper: Mapping[str, Node], z: Node) -> Node:
    if len(mapper) != 4:
        raise ShapeError(f"mapping layer must have exactly two layers, got {len(mapper) // 2}")
    return mlp(g, mapper, z)


def domain_head(g: Graph, fd: Mapping[str, Node], h: Node) -> Node:
    """Sigmoid output of the domain classifier, one value in (0, 1) per row."""
    return g.sigmoid(mlp(g, fd, h))


def difficulty_score(g: Graph, fd: Mapping[str, Node], mapper: Mapping[str, Node], z: Node) -> Node:
    """Transfer-difficulty score ``f_d(M(z))`` of shape ``(n, 1)``."""
    return domain_head(g, fd, map_features(g, mapper, z))


def fuse(g: Graph, z: Node, rho: Node, mapper: Mapping[str, Node], mapped: Node | None = None) -> Node:
    """``c = z + rho * M(z)`` with rho broadcast across feature columns.

    ``mapped`` lets the caller reuse an already computed ``M(z)``.
    """
    n, d = z.shape
    if rho.shape != (n, 1):
        raise ShapeError(f"fuse: rho shape {rho.shape} does not match {(n, 1)}")
    m = map_features(g, mapper, z) if mapped is None else mapped
    return g.add(z, g.mul(g.broadcast_cols(rho, d), m))


def classify(g: Graph, clf: Mapping[str, Node], c: Node) -> Node:
    """Raw logits of a single linear layer."""
    if len(clf) != 2:
        raise ShapeError("classifier is a single linear layer")
    return mlp(g, clf, c)


def prototype_classifier(features: np.ndarray, labels: np.ndarray, n_way: int) -> ParamSet:
    """Linear head equivalent to nearest-mean under squared Euclidean distance.

    ``logit_k = 2 c.p_k - |p_k|^2`` where ``p_k`` is the mean feature of class k.
    """
    protos = np.stack([features[labels == k].mean(axis=0) for k in range(n_way)])
    return ParamSet({"w0": 2.0 * protos.T, "b0": -(protos * protos).sum(axis=1)})


# numpy conveniences for inference-only callers ---------------------------------

def run(fn, *params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    g = Graph()
    bound = [g.bind(p) for p in params]
    return fn(g, *bound, g.constant(x)).value


def encode_np(enc: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    return run(encode, enc, x=x)


# serialization ------------------------------------------------------------------

def save_params(stem: str | Path, groups: Mapping[str, ParamSet], meta: Mapping | None = None) -> None:
    """Write ``stem.json`` (manifest) and ``stem.bin`` (little-endian float64 blob)."""
    stem = Path(stem)
    entries, chunks, offset = [], [], 0
    for group, params in groups.items():
        for name, value in params.items():
            entries.append({"name": f"{group}/{name}", "shape": list(value.shape), "offset": offset})
            chunks.append(value.astype("<f8").tobytes())
            offset += value.size
    manifest = {"dtype": "<f8", "count": offset, "tensors": entries, "meta": dict(meta or {})}
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_params(stem: str | Path) -> tuple[dict[str, ParamSet], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise ValueError(f"blob holds {blob.size} values, manifest expects {manifest['count']}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        start = entry["offset"]
        if start + size > blob.size:
            raise ValueError(f"{entry['name']}: shape {shape} overruns blob")
        group, name = entry["name"].split("/", 1)
        groups.setdefault(group, {})[name] = blob[start:start + size].reshape(shape)
    return {k: ParamSet(v) for k, v in groups.items()}, manifest["meta"]
