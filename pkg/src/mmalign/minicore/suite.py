"""Randomized finite-difference suite over every differentiable op.

``CASES`` maps an op name to a builder ``rng -> (f, inputs)`` where ``f`` maps
the inputs to a scalar. Builders look ops up through the ``ops`` module at
call time, so tests can swap in a broken op to check that the suite catches it.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .gradcheck import grad_check
from .tensor import Tensor

Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[Tensor]]]


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _dims(rng, lo=1, hi=5, n=2):
    return [int(d) for d in rng.integers(lo, hi + 1, size=n)]


def _reduce(rng, shape):
    # fixed random readout so every output coordinate matters
    w = Tensor(rng.normal(size=shape))
    return lambda y: ops.total(ops.mul(y, w))


def _case_add(rng):
    r, c = _dims(rng)
    a, b = _leaf(rng, r, c), _leaf(rng, r, c)
    red = _reduce(rng, (r, c))
    return (lambda a, b: red(ops.add(a, b))), [a, b]


def _case_add_bias(rng):
    r, c = _dims(rng)
    a, b = _leaf(rng, r, c), _leaf(rng, c)
    red = _reduce(rng, (r, c))
    return (lambda a, b: red(ops.add(a, b))), [a, b]


def _case_sub(rng):
    r, c = _dims(rng)
    a, b = _leaf(rng, r, c), _leaf(rng, r, c)
    red = _reduce(rng, (r, c))
    return (lambda a, b: red(ops.sub(a, b))), [a, b]


def _case_mul(rng):
    r, c = _dims(rng)
    a, b = _leaf(rng, r, c), _leaf(rng, r, c)
    red = _reduce(rng, (r, c))
    return (lambda a, b: red(ops.mul(a, b))), [a, b]


def _case_scale(rng):
    r, c = _dims(rng)
    k = float(rng.normal())
    red = _reduce(rng, (r, c))
    return (lambda a: red(ops.scale(a, k))), [_leaf(rng, r, c)]


def _case_total(rng):
    r, c = _dims(rng)
    return (lambda a: ops.total(ops.mul(a, a))), [_leaf(rng, r, c)]


def _case_mean(rng):
    r, c = _dims(rng)
    return (lambda a: ops.mean(ops.mul(a, a))), [_leaf(rng, r, c)]


def _case_matmul(rng):
    m, k, n = _dims(rng, n=3)
    red = _reduce(rng, (m, n))
    return (lambda a, b: red(ops.matmul(a, b))), [_leaf(rng, m, k), _leaf(rng, k, n)]


def _case_transpose(rng):
    r, c = _dims(rng)
    red = _reduce(rng, (c, r))
    return (lambda a: red(ops.transpose(a))), [_leaf(rng, r, c)]


def _case_columns(rng):
    r, c = _dims(rng, 1, 6)
    lo = int(rng.integers(0, c))
    hi = int(rng.integers(lo + 1, c + 1))
    red = _reduce(rng, (r, hi - lo))
    return (lambda a: red(ops.columns(a, lo, hi))), [_leaf(rng, r, c)]


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    r, c = _dims(rng)
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        k = int(rng.integers(1, 4))
        parts.append(_leaf(rng, k, c) if axis == 0 else _leaf(rng, r, k))
    shape = (sum(p.shape[0] for p in parts), c) if axis == 0 else (r, sum(p.shape[1] for p in parts))
    red = _reduce(rng, shape)
    return (lambda *ps: red(ops.concat(list(ps), axis=axis))), parts


def _case_embedding(rng):
    v, d = _dims(rng, 2, 6)
    ids = [int(i) for i in rng.integers(0, v, size=int(rng.integers(1, 7)))]
    red = _reduce(rng, (len(ids), d))
    return (lambda t: red(ops.embedding_lookup(t, ids))), [_leaf(rng, v, d)]


def _case_gelu(rng):
    r, c = _dims(rng)
    x = Tensor(rng.normal(scale=2.0, size=(r, c)), requires_grad=True)
    red = _reduce(rng, (r, c))
    return (lambda a: red(ops.gelu(a))), [x]


def _case_masked_softmax(rng):
    r, c = _dims(rng, 1, 6)
    keep = rng.random((r, c)) < 0.7
    keep[np.arange(r), rng.integers(0, c, size=r)] = True  # no empty row
    mask = np.where(keep, 0.0, ops.NEG_INF)
    red = _reduce(rng, (r, c))
    return (lambda a: red(ops.masked_softmax(a, mask))), [_leaf(rng, r, c)]


def _case_layernorm(rng):
    r, c = _dims(rng, 1, 6)
    c = max(c, 2)
    x = rng.normal(size=(r, c))
    # central differences need the row spread to be large next to h
    while (x.std(axis=1) < 0.1).any():
        x = rng.normal(size=(r, c))
    red = _reduce(rng, (r, c))
    return (lambda x, g, b: red(ops.layernorm(x, g, b))), [Tensor(x, requires_grad=True), _leaf(rng, c), _leaf(rng, c)]


def _case_conv1d(rng):
    cin, cout = _dims(rng, 1, 3)
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    pl, pr = (int(p) for p in rng.integers(0, 3, size=2))
    length = int(rng.integers(max(1, k - pl - pr), 10))
    out_len = ops.conv_output_length(length, k, stride, pl, pr)
    red = _reduce(rng, (cout, out_len))
    return (
        (lambda x, w, b: red(ops.conv1d(x, w, b, stride, pl, pr))),
        [_leaf(rng, cin, length), _leaf(rng, cout, cin, k), _leaf(rng, cout)],
    )


def _case_cross_entropy(rng):
    n, v = _dims(rng, 1, 6)
    v = max(v, 2)
    labels = [int(x) if rng.random() > 0.3 else -100 for x in rng.integers(0, v, size=n)]
    return (lambda x: ops.cross_entropy_ignore(x, labels, -100)), [_leaf(rng, n, v)]


CASES: Dict[str, Builder] = {
    "add": _case_add,
    "add_bias": _case_add_bias,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "total": _case_total,
    "mean": _case_mean,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "columns": _case_columns,
    "concat": _case_concat,
    "embedding_lookup": _case_embedding,
    "gelu": _case_gelu,
    "masked_softmax": _case_masked_softmax,
    "layernorm": _case_layernorm,
    "conv1d": _case_conv1d,
    "cross_entropy_ignore": _case_cross_entropy,
}


@dataclass
class OpResult:
    op: str
    cases: int
    max_rel_err: float
    worst_case: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


@dataclass
class SuiteReport:
    tol: float
    results: List[OpResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed(self.tol) for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    def table(self) -> str:
        lines = [f"{'op':<22}{'cases':>6}{'max rel err':>14}  status"]
        for r in self.results:
            lines.append(f"{r.op:<22}{r.cases:>6}{r.max_rel_err:>14.3e}  {'ok' if r.passed(self.tol) else 'FAIL'}")
        return "\n".join(lines)


def run_suite(
    ops_to_check: Optional[Sequence[str]] = None,
    cases: int = 100,
    seed: int = 0,
    h: float = 1e-4,
    tol: float = 1e-5,
) -> SuiteReport:
    names = list(CASES) if ops_to_check is None else list(ops_to_check)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"no gradient case registered for {unknown}")
    if not names:
        raise ValueError("empty op list: nothing to verify")
    start = time.perf_counter()
    report = SuiteReport(tol)
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst, worst_i = 0.0, 0
        for i in range(cases):
            f, inputs = CASES[name](rng)
            err = grad_check(f, inputs, h=h, tol=tol).max_rel_err
            if err > worst or np.isnan(err):
                worst, worst_i = err, i
        report.results.append(OpResult(name, cases, worst, worst_i))
    report.seconds = time.perf_counter() - start
    return report
