"""Differentiable operations.

Only what the projectors, the tiny decoder and the losses need. Shapes are
checked up front; broadcasting is limited to adding a bias row.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ContractError, DimensionError, Tensor, as_tensor, make_result

#: additive-mask value that drops a position; anything at or below it counts
NEG_INF = -np.inf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {x.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return make_result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape
    return make_result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    return make_result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]``."""
    _require_2d(x, "columns")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"columns: bad range [{start}, {stop}) for shape {x.shape}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop].copy(), (x,), back, "columns")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate 2-D tensors along ``axis``."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat: nothing to concatenate")
    for p in parts:
        _require_2d(p, "concat")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[p.shape for p in parts]} along axis {axis}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        if axis == 0:
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return make_result(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate gradient."""
    _require_2d(table, "embedding_lookup")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("embedding_lookup: ids must be a non-empty flat sequence")
    n = table.shape[0]
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise IndexError(f"embedding_lookup: id {int(bad[0])} out of range for table with V={n}")
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(table.data[idx], (table,), back, "embedding_lookup")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(xd * cdf, (x,), back, "gelu")


def masked_softmax(logits: Tensor, additive_mask) -> Tensor:
    """Softmax over the last axis with an additive 0 / -inf mask.

    Dropped positions come out as exact zeros and pass no gradient. The kept
    entries are normalised over the kept subset only, so adding more dropped
    columns cannot perturb them.
    """
    mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
    if mask.shape != logits.shape:
        raise DimensionError(f"masked_softmax: mask shape {mask.shape} != logits shape {logits.shape}")
    keep = mask == 0.0
    dropped = np.isneginf(mask)
    if not np.all(keep | dropped):
        raise ContractError("masked_softmax: mask entries must be 0 (keep) or -inf (drop)")
    if not np.all(keep.any(axis=-1)):
        row = np.argwhere(~keep.any(axis=-1))[0]
        raise ContractError(f"masked_softmax: degenerate row {tuple(int(i) for i in row)} has every position masked")
    z = np.where(keep, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (logits,), back, "masked_softmax")


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis then apply ``gain`` and ``shift``."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape} / shift {shift.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gd + shift.data, (x, gain, shift), back, "layernorm")


def conv_output_length(length: int, kernel: int, stride: int, pad_left: int = 0, pad_right: int = 0) -> int:
    padded = length + pad_left + pad_right
    if kernel > padded:
        raise DimensionError(f"conv1d: kernel {kernel} larger than padded input length {padded}")
    return (padded - kernel) // stride + 1


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad_left: int = 0,
    pad_right: int = 0,
) -> Tensor:
    """1-D cross-correlation of ``x`` (C_in x L) with ``w`` (C_out x C_in x K)."""
    x, w = as_tensor(x), as_tensor(w)
    _require_2d(x, "conv1d")
    if w.data.ndim != 3 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1d: weight {w.shape} does not match input {x.shape}")
    if stride < 1 or pad_left < 0 or pad_right < 0:
        raise ContractError("conv1d: stride must be positive and padding non-negative")
    c_out, c_in, k = w.shape
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match {c_out} output channels")
    length = x.shape[1]
    out_len = conv_output_length(length, k, stride, pad_left, pad_right)
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right)))
    # windows[c, j, k] = xp[c, j*stride + k]
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :][:, :out_len, :]
    wd = w.data
    out = np.einsum("ock,cjk->oj", wd, windows, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None]
    padded_len = xp.shape[1]
    span = stride * (out_len - 1) + 1

    def back(g):
        gw = np.einsum("oj,cjk->ock", g, windows, optimize=True)
        gwin = np.einsum("ock,oj->cjk", wd, g, optimize=True)
        gxp = np.zeros((c_in, padded_len))
        for kk in range(k):
            gxp[:, kk : kk + span : stride] += gwin[:, :, kk]
        gx = gxp[:, pad_left : pad_left + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, back, "conv1d")


def cross_entropy_ignore(logits: Tensor, labels: Sequence[int], ignore_id: int) -> Tensor:
    """Mean token NLL over positions whose label is not ``ignore_id``.

    With every position ignored the result is exactly 0 and the gradient is
    all zeros; the graph link is kept so upstream parameters stay reachable.
    """
    _require_2d(logits, "cross_entropy_ignore")
    lab = np.asarray(list(labels), dtype=np.int64)
    t, v = logits.shape
    if lab.shape != (t,):
        raise DimensionError(f"cross_entropy_ignore: {lab.size} labels for {t} positions")
    sup = lab != ignore_id
    bad = lab[sup & ((lab < 0) | (lab >= v))]
    if bad.size:
        raise IndexError(f"cross_entropy_ignore: label {int(bad[0])} out of range for V={v}")
    n = int(sup.sum())
    if n == 0:
        return make_result(np.array(0.0), (logits,), lambda g: (np.zeros((t, v)),), "cross_entropy_ignore")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(sup)[0]
    loss = -logp[rows, lab[rows]].sum() / n

    def back(g):
        grad = np.zeros((t, v))
        p = np.exp(logp[rows])
        p[np.arange(rows.size), lab[rows]] -= 1.0
        grad[rows] = p * (float(g) / n)
        return (grad,)

    return make_result(np.array(loss), (logits,), back, "cross_entropy_ignore")


def stack_rows(parts: List[Tensor]) -> Tensor:
    return concat(parts, axis=0)
