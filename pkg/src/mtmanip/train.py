"""Seeded training loop with exact checkpoint/resume."""
from __future__ import annotations

import logging
from typing import Callable, Dict, Optional

import numpy as np

from .io import Checkpoint, checkpoint_from, restore
from .net import MultiTaskNet, NetConfig
from .optim import TASKS, BatchLosses, RmsProp, joint_step

log = logging.getLogger(__name__)


class Trainer:
    """Draws per-task batches with replacement and applies joint steps.

    Batch indices come from one generator whose state is checkpointed;
    dropout masks are derived from ``(seed, iteration, task)``. Together
    these make a resumed run step-identical to an uninterrupted one.
    """

    def __init__(self, net: MultiTaskNet, opt: RmsProp, datasets: Dict[str, object],
                 batch_size: int = 32, seed: int = 0, rng: Optional[np.random.Generator] = None):
        self.net = net
        self.opt = opt
        self.datasets = {t: ds for t, ds in datasets.items() if ds is not None and len(ds) > 0}
        self.batch_size = batch_size
        self.seed = seed
        self.rng = rng if rng is not None else np.random.default_rng([seed, 0xBA7C4])

    @classmethod
    def fresh(cls, config: NetConfig, datasets, batch_size: int = 32, seed: int = 0,
              lr_step: int = 5000) -> "Trainer":
        return cls(MultiTaskNet(config, seed=seed), RmsProp(lr_step=lr_step), datasets, batch_size, seed)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, datasets, batch_size: Optional[int] = None) -> "Trainer":
        net, opt, rng = restore(ck)
        return cls(net, opt, datasets, batch_size or ck.meta.get("batch_size", 32),
                   ck.meta.get("seed", 0), rng)

    @property
    def iteration(self) -> int:
        return self.opt.iteration

    def sample_batches(self) -> dict:
        batches = {}
        for task in TASKS:
            ds = self.datasets.get(task)
            if ds is not None:
                idx = self.rng.integers(0, len(ds), size=self.batch_size)
                batches[task] = ds.batch(idx)
        return batches

    def step(self) -> BatchLosses:
        return joint_step(self.net, self.opt, self.sample_batches(), dropout_seed=self.seed)

    def run(self, iterations: int, callback: Optional[Callable[[int, BatchLosses], None]] = None,
            log_every: int = 0) -> Optional[BatchLosses]:
        losses = None
        for _ in range(iterations):
            losses = self.step()
            if callback is not None:
                callback(self.iteration, losses)
            if log_every and self.iteration % log_every == 0:
                log.info("iter %d losses %s", self.iteration, losses)
        return losses

    def checkpoint(self, meta: Optional[dict] = None) -> Checkpoint:
        m = {"seed": self.seed, "batch_size": self.batch_size}
        m.update(meta or {})
        return checkpoint_from(self.net, self.opt, self.rng, m)
