"""Collection of releasable statistics: per-layer Gram sums and diagonal Fisher.

Data order is fixed by the dataset itself; accumulation is an ordered
reduction in float64 so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import zoo
from .data import Dataset
from .tensorfile import FisherStats, GramStats


@dataclass(frozen=True)
class CollectConfig:
    batch_size: int = 16
    max_batches: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_batches < 1:
            raise ValueError("max_batches must be >= 1")


def _batches(n: int, cfg: CollectConfig):
    limit = min(n, cfg.batch_size * cfg.max_batches)
    for start in range(0, limit, cfg.batch_size):
        yield np.arange(start, min(start + cfg.batch_size, limit))


def collect_gram(model: zoo.ModelInstance, data: Dataset, cfg: CollectConfig) -> GramStats:
    """Accumulate X^T X of every linear layer's inputs in one forward pass.

    For token-structured layers (mini transformer) the inputs are flattened
    over batch and token dims; example counts still track dataset examples.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for idx in _batches(len(data), cfg):
        trace = zoo.forward(model, data.x[idx], record=True)
        for layer, x_in in trace.layer_inputs.items():
            contrib = x_in.T @ x_in
            if layer in sums:
                sums[layer] += contrib
                counts[layer] += len(idx)
            else:
                sums[layer] = contrib
                counts[layer] = len(idx)
    return GramStats(gram_sums=sums, example_counts=counts, batch_cap=cfg.max_batches)


def collect_fisher(model: zoo.ModelInstance, data: Dataset, cfg: CollectConfig) -> FisherStats:
    """Expected diagonal Fisher under the model's own predictive distribution.

    Classes are enumerated exactly (no label sampling): for each example the
    squared gradient of the class log-probability is weighted by the
    predicted probability of that class. Multi-label models use the
    per-class Bernoulli distribution (both outcomes per class).
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    spec = model.spec
    acc = {k: np.zeros_like(np.asarray(model.params[k], dtype=np.float64))
           for k in model.params.keys()}
    n_done = 0
    limit = min(len(data), cfg.batch_size * cfg.max_batches)
    for i in range(limit):
        x = data.x[i:i + 1]
        logits = zoo.forward(model, x).logits[0]
        if spec.multilabel:
            s = 1.0 / (1.0 + np.exp(-logits))
            for c in range(spec.num_classes):
                dlogits = np.zeros((1, spec.num_classes))
                # outcome y=1 with prob s[c]: d log p / d z_c = 1 - s[c]
                dlogits[0, c] = 1.0 - s[c]
                g = zoo.grads_from_dlogits(model, x, dlogits)
                for k in acc:
                    acc[k] += s[c] * np.square(g[k])
                # outcome y=0 with prob 1 - s[c]: d log p / d z_c = -s[c]
                dlogits[0, c] = -s[c]
                g = zoo.grads_from_dlogits(model, x, dlogits)
                for k in acc:
                    acc[k] += (1.0 - s[c]) * np.square(g[k])
        else:
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            for c in range(spec.num_classes):
                dlogits = -probs[None, :].copy()
                dlogits[0, c] += 1.0
                g = zoo.grads_from_dlogits(model, x, dlogits)
                for k in acc:
                    acc[k] += probs[c] * np.square(g[k])
        n_done += 1
    fishers = {k: v / n_done for k, v in acc.items()}
    return FisherStats(fishers=fishers, example_count=n_done)
