"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class InputCheck:
    index: int
    name: str
    shape: tuple
    max_abs_err: float
    scale: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    inputs: List[InputCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def table(self) -> str:
        lines = [f"{'input':<16}{'shape':<18}{'max|err|':>12}{'scale':>12}{'rel':>12}"]
        for c in self.inputs:
            lines.append(f"{c.name:<16}{str(c.shape):<18}{c.max_abs_err:>12.3e}{c.scale:>12.3e}{c.rel_err:>12.3e}")
        return "\n".join(lines)


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], which: int, h: float) -> np.ndarray:
    x = inputs[which]
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*inputs).item()
        flat[i] = orig - h
        fm = f(*inputs).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-5,
    names: Sequence[str] = (),
) -> GradCheckReport:
    """Compare backward against central differences for every requires-grad input.

    The relative error of an input is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-norms (floored at 1e-12), which keeps
    near-zero coordinates from dominating. Failures are reported, never raised.
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    backward(out)
    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = numeric_grad(f, inputs, i, h)
        err = float(np.max(np.abs(analytic - numeric)))
        scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
        rel = err / scale
        name = names[i] if i < len(names) else (x.name or f"input{i}")
        report.inputs.append(InputCheck(i, name, x.shape, err, scale, rel))
        report.max_rel_err = max(report.max_rel_err, rel)
    for t in inputs:
        t.zero_grad()
    return report
