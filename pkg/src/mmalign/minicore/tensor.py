"""Tensor type and the reverse-mode sweep.

Every op returns a new :class:`Tensor` holding references to its parents and a
closure that maps the upstream gradient to one gradient per parent. The tape is
rebuilt on every forward pass; nothing is cached between passes.

Gradients are computed into a table owned by the call to :func:`backward`, so
several graphs that share parameter tensors can be differentiated from
different threads without touching shared state. Writing into ``Tensor.grad``
is an explicit, opt-in step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

_node_ids = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes do not fit an op."""


class ContractError(RuntimeError):
    """Raised when a caller breaks an op's precondition."""


class FrozenTensorError(ContractError):
    """Raised when a frozen (encoder-owned) value is asked to carry gradient."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array that can sit in a reverse-mode graph."""

    __slots__ = ("data", "grad", "name", "node_id", "_requires_grad", "_frozen", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        frozen: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        # leaves own a private copy; op outputs are fresh arrays already
        self.data = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in self.data.shape):
            raise DimensionError(f"tensor dimensions must be positive, got shape {self.data.shape}")
        self._frozen = frozen
        if frozen and requires_grad:
            raise FrozenTensorError(f"frozen tensor {name!r} cannot require grad")
        self._requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id = next(_node_ids)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self._frozen:
            raise FrozenTensorError(f"frozen tensor {self.name!r} cannot require grad")
        self._requires_grad = bool(value)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    @property
    def T(self) -> "Tensor":
        from . import ops

        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op output; records the parents only if any of them needs gradient."""
    needs = any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(data, op=op)
    out = Tensor(data, _parents=parents, _backward=backward_fn, op=op)
    out._requires_grad = True
    return out


@dataclass
class Graph:
    """Operations reachable from one output, in an order valid for backward.

    Node ids come from a monotone counter and a parent always exists before its
    child, so ascending id order is a topological order.
    """

    nodes: List[Tensor]

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: Dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def contains(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class BackwardResult:
    """Gradients of one backward sweep plus the unused-parameter report."""

    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    unused: List[str] = field(default_factory=list)
    graph_size: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]


def backward(
    loss: Tensor,
    params: Optional[Mapping[str, Tensor]] = None,
    accumulate: bool = True,
) -> BackwardResult:
    """Run reverse mode from a scalar ``loss``.

    Args:
        loss: scalar tensor produced in the active graph.
        params: named trainable tensors. Every entry with ``requires_grad`` that
            is reachable from ``loss`` gets a gradient (zeros if nothing flows);
            unreachable ones are listed in ``unused``.
        accumulate: also add the gradients into ``Tensor.grad`` of every
            requires-grad leaf. Simulated devices pass False so shared
            parameters are never written.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    table: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        g = table.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            if pg.shape != parent.data.shape:
                raise DimensionError(
                    f"op {node.op} produced gradient of shape {pg.shape} for input of shape {parent.data.shape}"
                )
            prev = table.get(id(parent))
            table[id(parent)] = pg if prev is None else prev + pg
        if node is not loss:
            # interior gradients are not needed after propagation
            del table[id(node)]

    reachable = {id(n) for n in graph.nodes}
    result = BackwardResult(graph_size=len(graph))
    if accumulate:
        for node in graph.nodes:
            if node.is_leaf and node.requires_grad:
                g = table.get(id(node), np.zeros_like(node.data))
                node.grad = g.copy() if node.grad is None else node.grad + g
    if params is not None:
        for name, p in params.items():
            if not p.requires_grad:
                continue
            if id(p) in reachable:
                result.grads[name] = table.get(id(p), np.zeros_like(p.data))
            else:
                result.unused.append(name)
    return result


def unused_parameters(loss: Tensor, params: Mapping[str, Tensor]) -> List[str]:
    """Names of requires-grad parameters not reachable from ``loss``."""
    graph = Graph.from_output(loss)
    reachable = {id(n) for n in graph.nodes}
    return [name for name, p in params.items() if p.requires_grad and id(p) not in reachable]


def parameters_of(tensors: Iterable[Tensor]) -> List[Tensor]:
    return [t for t in tensors if t.requires_grad]
