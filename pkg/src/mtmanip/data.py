"""In-memory task datasets and the seeded generator that fills them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import world
from .errors import ContractError

TASKS = ("grasp", "push", "poke")
TASK_STREAM = {"grasp": 0, "push": 1, "poke": 2}

DEFAULT_POOL_SIZES = {"train": 128, "novel": 64}


def to_input(images_u8: np.ndarray) -> np.ndarray:
    """(N, 64, 64, 3) uint8 -> (N, 3, 64, 64) float64 in [0, 1]."""
    return np.ascontiguousarray(images_u8.transpose(0, 3, 1, 2), dtype=np.float64) / 255.0


@dataclass
class GraspSet:
    patches: np.ndarray  # (N, 64, 64, 3) uint8
    theta: np.ndarray    # (N,) uint8, 0..17
    y: np.ndarray        # (N,) uint8, 0/1
    task = "grasp"

    def __len__(self) -> int:
        return len(self.theta)

    def take(self, idx) -> "GraspSet":
        return GraspSet(self.patches[idx], self.theta[idx], self.y[idx])

    def batch(self, idx=slice(None)):
        return to_input(self.patches[idx]), self.theta[idx].astype(np.intp), self.y[idx].astype(np.float64)


@dataclass
class PushSet:
    begin: np.ndarray
    end: np.ndarray
    action: np.ndarray   # (N, 5) float64, normalised
    task = "push"

    def __len__(self) -> int:
        return len(self.action)

    def take(self, idx) -> "PushSet":
        return PushSet(self.begin[idx], self.end[idx], self.action[idx])

    def batch(self, idx=slice(None)):
        return to_input(self.begin[idx]), to_input(self.end[idx]), self.action[idx]


@dataclass
class PokeSet:
    image: np.ndarray
    response: np.ndarray  # (N, 2) float64
    task = "poke"

    def __len__(self) -> int:
        return len(self.response)

    def take(self, idx) -> "PokeSet":
        return PokeSet(self.image[idx], self.response[idx])

    def batch(self, idx=slice(None)):
        return to_input(self.image[idx]), self.response[idx]


def head(ds, n: int):
    """First ``n`` records (a prefix keeps nested budgets comparable)."""
    if n > len(ds):
        raise ContractError(f"asked for {n} {ds.task} records, only {len(ds)} available")
    return ds.take(slice(0, n))


def sample_rng(seed: int, task: str, index: int) -> np.random.Generator:
    """Each record draws from its own stream, so record i never depends on N."""
    return np.random.default_rng([int(seed), TASK_STREAM[task], int(index)])


def generate(task: str, n: int, seed: int, pool: world.ObjectPool, balanced: bool = True,
             poke_noise: float = 0.0, start: int = 0):
    """Generate records ``start .. start+n-1`` of one task stream."""
    idx = range(start, start + n)
    if task == "grasp":
        samples = [world.sample_grasp(pool, sample_rng(seed, task, i), balanced) for i in idx]
        return GraspSet(_stack([s.patch for s in samples], (0, 64, 64, 3)),
                        np.array([s.theta_d for s in samples], dtype=np.uint8),
                        np.array([s.y for s in samples], dtype=np.uint8))
    if task == "push":
        samples = [world.sample_push(pool, sample_rng(seed, task, i)) for i in idx]
        return PushSet(_stack([s.begin for s in samples], (0, 64, 64, 3)),
                       _stack([s.end for s in samples], (0, 64, 64, 3)),
                       _stack([s.action for s in samples], (0, 5), np.float64))
    if task == "poke":
        samples = [world.sample_poke(pool, sample_rng(seed, task, i), poke_noise) for i in idx]
        return PokeSet(_stack([s.image for s in samples], (0, 64, 64, 3)),
                       _stack([s.response for s in samples], (0, 2), np.float64))
    raise ContractError(f"unknown task {task!r}")


def _stack(items: Sequence[np.ndarray], empty_shape, dtype=np.uint8) -> np.ndarray:
    if not items:
        return np.zeros(empty_shape, dtype=dtype)
    return np.stack(items).astype(dtype, copy=False)


def build_datasets(mix: Dict[str, int], seed: int, pool: str = "train",
                   pool_size: Optional[int] = None, balanced: bool = True,
                   poke_noise: float = 0.0) -> Dict[str, object]:
    """Datasets for a task mix like ``{"grasp": 100, "push": 0, "poke": 0}``.

    Tasks with a zero count are omitted from the result.
    """
    counts = {t: int(mix.get(t, 0)) for t in TASKS}
    if any(c < 0 for c in counts.values()):
        raise ContractError(f"negative record count in {counts}")
    if sum(counts.values()) == 0:
        raise ContractError("task mix has zero total records")
    objects = world.ObjectPool(pool, pool_size or DEFAULT_POOL_SIZES[pool])
    return {t: generate(t, c, seed, objects, balanced, poke_noise) for t, c in counts.items() if c > 0}
