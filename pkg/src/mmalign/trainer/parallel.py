"""Data parallelism simulated inside one process.

Each simulated device builds its own graph over a contiguous shard of the
batch and runs backward without touching shared ``.grad`` fields. Shard
gradients are folded in device order, weighted by supervised-token counts, so
the reduced gradient is the gradient of the full-batch mean loss.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from ..minicore import backward
from .model import MultimodalModel, Sample


@dataclass
class ShardResult:
    index: int
    loss: float
    n_supervised: int
    grads: Dict[str, np.ndarray]
    unused: List[str]


@dataclass
class DataParallelResult:
    shards: List[ShardResult]
    reduced: Dict[str, np.ndarray]
    loss: float
    n_supervised: int
    trainable: List[str] = field(default_factory=list)

    @property
    def reports(self) -> List[List[str]]:
        return [s.unused for s in self.shards]

    @property
    def per_shard_grads(self) -> List[Dict[str, np.ndarray]]:
        return [s.grads for s in self.shards]

    @property
    def all_used(self) -> bool:
        return not any(self.reports)


def prepare(samples: Sequence[Sample], model: MultimodalModel, placeholder_mode: str) -> List[Sample]:
    if placeholder_mode == "on":
        return [model.with_placeholders(s) for s in samples]
    if placeholder_mode == "off":
        return [model.without_placeholders(s) for s in samples]
    raise ValueError(f"placeholder_mode must be 'on' or 'off', got {placeholder_mode!r}")


def _run_shard(index: int, shard: Sequence[Sample], model: MultimodalModel) -> ShardResult:
    params = model.trainable()
    loss, n_sup = model.batch_loss(shard)
    res = backward(loss, params, accumulate=False)
    return ShardResult(index, loss.item(), n_sup, res.grads, res.unused)


def full_batch_gradients(samples: Sequence[Sample], model: MultimodalModel, placeholder_mode: str = "on") -> ShardResult:
    """Single-graph oracle over the whole batch."""
    return _run_shard(0, prepare(samples, model, placeholder_mode), model)


def simulate_data_parallel_step(
    batch: Sequence[Sample],
    model: MultimodalModel,
    K: int,
    placeholder_mode: str = "on",
    workers: int = 1,
) -> DataParallelResult:
    n = len(batch)
    if K <= 0 or n % K:
        raise ValueError(f"batch of {n} cannot be split across {K} devices")
    samples = prepare(batch, model, placeholder_mode)
    per = n // K
    shards = [samples[k * per : (k + 1) * per] for k in range(K)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _run_shard(a[0], a[1], model), enumerate(shards)))
    else:
        results = [_run_shard(k, s, model) for k, s in enumerate(shards)]

    names = list(model.trainable())
    total = sum(r.n_supervised for r in results)
    reduced: Dict[str, np.ndarray] = {}
    params = model.named_parameters()
    for name in names:
        acc = np.zeros_like(params[name].data)
        for r in results:  # fixed device order
            if total and r.n_supervised:
                g = r.grads.get(name)
                if g is not None:
                    acc = acc + (r.n_supervised / total) * g
        reduced[name] = acc
    loss = sum(r.loss * r.n_supervised for r in results) / total if total else 0.0
    return DataParallelResult(results, reduced, float(loss), total, names)
