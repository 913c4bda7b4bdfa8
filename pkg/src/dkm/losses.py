"""Training objectives, all exposed as losses to minimize.

The maximisation objectives (mixed pretraining, the discriminator) are
negated here so every optimizer step downstream is plain descent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ShapeError

EPS = 1e-7


@dataclass(frozen=True)
class Schedule:
    kappa: float = 0.1
    total_epochs: int = 50

    def __post_init__(self) -> None:
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")


def alpha(t: float, sched: Schedule) -> float:
    """Linear ramp ``kappa * t / T`` of the self-supervised weight."""
    if not 0 <= t <= sched.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {sched.total_epochs}]")
    return sched.kappa * t / sched.total_epochs


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(g: Graph, logits: Node, labels: np.ndarray) -> Node:
    n, c = logits.shape
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} logit rows")
    picked = g.mul(g.log_softmax(logits), g.constant(_one_hot(labels, c)))
    return g.scalar_mul(g.sum(picked), -1.0 / n)


def _stable_log_sum_exp(g: Graph, sims: Node, mask: np.ndarray | None) -> Node:
    """Row-wise ``log sum_k mask_k exp(sims_k)`` with a detached max shift."""
    vals = sims.value if mask is None else np.where(mask, sims.value, -np.inf)
    shift = vals.max(axis=1, keepdims=True)
    e = g.exp(g.sub(sims, g.broadcast_cols(g.constant(shift), sims.shape[1])))
    if mask is not None:
        e = g.mul(e, g.constant(mask.astype(np.float64)))
    return g.add(g.log(g.sum(e, axis=1)), g.constant(shift))


def info_nce(g: Graph, z1: Node, z2: Node, tau: float) -> Node:
    """Negated contrastive estimator; row i of ``z2`` is the positive for row i of ``z1``."""
    n = z1.shape[0]
    if z2.shape != z1.shape:
        raise ShapeError(f"views differ in shape: {z1.shape} vs {z2.shape}")
    if n < 2:
        raise ValueError("info_nce needs at least two rows for negatives")
    sims = g.scalar_mul(g.matmul(z1, g.transpose(z2)), 1.0 / tau)
    pos = g.sum(g.mul(sims, g.constant(np.eye(n))), axis=1)
    lse = _stable_log_sum_exp(g, sims, None)
    return g.mean(g.sub(lse, pos))


def class_aware_mask(labels: np.ndarray, n_bank: int) -> np.ndarray:
    """Denominator membership: the positive, other-class rows, and every bank row."""
    labels = np.asarray(labels)
    n = labels.size
    keep = labels[:, None] != labels[None, :]
    keep[np.arange(n), np.arange(n)] = True
    return np.hstack([keep, np.ones((n, n_bank), dtype=bool)])


def info_nce_class_aware(
    g: Graph,
    z1: Node,
    z2: Node,
    labels: np.ndarray,
    novel_bank: np.ndarray | Node | None,
    tau: float,
) -> Node:
    """Contrastive loss whose negatives skip same-class rows and add novel-class features."""
    n, d = z1.shape
    if z2.shape != z1.shape or len(labels) != n:
        raise ShapeError("views and labels must be row-aligned")
    if novel_bank is None:
        novel_bank = np.zeros((0, d))
    bank = novel_bank if isinstance(novel_bank, Node) else g.constant(np.asarray(novel_bank).reshape(-1, d))
    mask = class_aware_mask(labels, bank.shape[0])
    if np.any(mask.sum(axis=1) < 2):
        bad = int(np.flatnonzero(mask.sum(axis=1) < 2)[0])
        raise ValueError(f"anchor {bad} has no negatives after same-class exclusion")
    keys = g.concat_rows(z2, bank) if bank.shape[0] else z2
    sims = g.scalar_mul(g.matmul(z1, g.transpose(keys)), 1.0 / tau)
    pos_sel = np.zeros(mask.shape)
    pos_sel[np.arange(n), np.arange(n)] = 1.0
    pos = g.sum(g.mul(sims, g.constant(pos_sel)), axis=1)
    lse = _stable_log_sum_exp(g, sims, mask)
    return g.mean(g.sub(lse, pos))


def pretrain_loss(g: Graph, ce: Node, ssl: Node, t: float, sched: Schedule) -> Node:
    """``ce + alpha(t) * ssl``."""
    if ce.graph is not g or ssl.graph is not g:
        raise ValueError("both losses must live on the same graph")
    return g.add(ce, g.scalar_mul(ssl, alpha(t, sched)))


def _check_rho(rho: Node) -> None:
    if rho.value.size == 0:
        raise ValueError("empty batch")


def discriminator_loss(g: Graph, rho_v: Node, rho_u: Node, d_u: float) -> Node:
    """``-[mean log rho_v + mean log clamp(d_u - rho_u, eps, 1)]``."""
    _check_rho(rho_v)
    _check_rho(rho_u)
    visible = g.mean(g.log(rho_v))
    gap = g.clamp(g.scalar_add(g.scalar_mul(rho_u, -1.0), d_u), EPS, 1.0)
    unseen = g.mean(g.log(gap))
    return g.scalar_mul(g.add(visible, unseen), -1.0)


def generator_loss(g: Graph, rho_u: Node, d_u: float) -> Node:
    """``mean log clamp(d_u - rho_u, eps, 1)``; descending it raises rho_u toward d_u."""
    _check_rho(rho_u)
    gap = g.clamp(g.scalar_add(g.scalar_mul(rho_u, -1.0), d_u), EPS, 1.0)
    return g.mean(g.log(gap))
