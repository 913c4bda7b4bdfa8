"""Functional SGD and Adam over ParamSets.

State objects are immutable; ``step`` returns new params and new state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nets import ParamSet


@dataclass(frozen=True)
class AdamState:
    t: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Optimizer:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def init(self, params: ParamSet) -> AdamState:
        return AdamState()

    def step(
        self, params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState, lr: float
    ) -> tuple[ParamSet, AdamState]:
        if self.kind == "sgd":
            return sgd_step(params, grads, lr), state
        t = state.t + 1
        m, v, updates = {}, {}, {}
        for name, grad in grads.items():
            m[name] = self.beta1 * state.m.get(name, 0.0) + (1 - self.beta1) * grad
            v[name] = self.beta2 * state.v.get(name, 0.0) + (1 - self.beta2) * grad * grad
            m_hat = m[name] / (1 - self.beta1**t)
            v_hat = v[name] / (1 - self.beta2**t)
            updates[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        merged_m = {**state.m, **m}
        merged_v = {**state.v, **v}
        return params.replace(updates), AdamState(t, merged_m, merged_v)


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    return params.replace({k: params[k] - lr * g for k, g in grads.items()})
