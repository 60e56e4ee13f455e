"""SGD and Adam with a constant learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 2e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the step count."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    cfg: OptimizerConfig,
    state: Optional[OptimizerState] = None,
    update: Optional[Iterable[str]] = None,
) -> OptimizerState:
    """Update ``params`` in place and return the (mutated) optimizer state.

    ``update`` restricts the step to the named subset; by default every entry
    of ``params`` is updated and therefore needs a gradient.
    """
    state = state if state is not None else OptimizerState()
    names = list(params) if update is None else list(update)
    missing = [n for n in names if n not in grads]
    if missing:
        raise ContractError(f"optimizer_step: no gradient for parameters {missing}")
    state.step += 1
    if cfg.kind == "sgd":
        for n in names:
            params[n].data -= cfg.lr * grads[n]
        return state

    b1, b2 = cfg.betas
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n in names:
        g = grads[n]
        p = params[n]
        if g.shape != p.shape:
            raise ContractError(f"optimizer_step: gradient shape {g.shape} != parameter {n} shape {p.shape}")
        m = state.m.get(n)
        v = state.v.get(n)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[n] = m
        state.v[n] = v
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state
