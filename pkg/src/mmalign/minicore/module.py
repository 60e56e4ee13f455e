"""Named-parameter containers."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .tensor import FrozenTensorError, Tensor


class Module:
    """Holds trainable tensors under dotted names, in registration order."""

    def __init__(self, prefix: str = ""):
        self._prefix = prefix
        self._params: Dict[str, Tensor] = {}

    def register_parameter(self, name: str, value) -> Tensor:
        if getattr(value, "frozen", False):
            raise FrozenTensorError(f"cannot register frozen value as trainable parameter {name!r}")
        full = f"{self._prefix}.{name}" if self._prefix else name
        if full in self._params:
            raise KeyError(f"parameter {full!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        t.name = full
        t.requires_grad = True
        self._params[full] = t
        return t

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [k for k in self._params if k not in state]
        if missing:
            raise KeyError(f"state is missing parameters {missing}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match parameter shape {t.shape}")
            t.data = arr.copy()
