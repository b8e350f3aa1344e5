"""Optimiser settings and minibatch scheduling shared by pretraining and fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .encoder import SmithModel


@dataclass
class TrainConfig:
    # Paper-scale defaults; desk runs override lr / warmup / steps.
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    warmup_steps: int = 10_000
    steps: int = 100_000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 0

    def optimizer(self, model: SmithModel, encoder_only: bool = False) -> dc.Adam:
        params = model.encoder_parameters() if encoder_only else model.params
        return dc.Adam(params, self.lr, self.beta1, self.beta2, self.eps, self.warmup_steps)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless index batches; reshuffled every pass over the data."""
    if n == 0:
        raise ValueError("no training examples")
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
