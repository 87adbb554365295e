"""RMSProp with momentum, the step learning-rate schedule, and the joint multi-task update."""
from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Dict, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError
from .losses import grasp_loss, poke_loss, push_loss
from .net import MultiTaskNet

TASKS = ("grasp", "push", "poke")
TASK_INDEX = {t: i for i, t in enumerate(TASKS)}


class RmsProp:
    """Per-parameter RMSProp with a momentum buffer.

    a <- decay*a + (1-decay)*g^2 ; s <- momentum*s + lr*g/sqrt(a+eps) ; p <- p - s
    """

    def __init__(self, lr: float = 0.002, momentum: float = 0.9, decay: float = 0.9,
                 eps: float = 1e-8, lr_step: int = 5000, lr_factor: float = 0.1):
        self.lr = lr
        self.momentum = momentum
        self.decay = decay
        self.eps = eps
        self.lr_step = lr_step
        self.lr_factor = lr_factor
        self.iteration = 0
        self.acc: Dict[str, np.ndarray] = {}
        self.mom: Dict[str, np.ndarray] = {}

    def learning_rate(self, iteration: Optional[int] = None) -> float:
        it = self.iteration if iteration is None else iteration
        k = it // self.lr_step
        # decimal arithmetic so 0.002 * 0.1**2 lands exactly on 2e-05
        return float(Decimal(repr(self.lr)) * Decimal(repr(self.lr_factor)) ** k)

    def update(self, name: str, param: ad.Tensor, grad: np.ndarray, lr: float) -> None:
        a = self.acc.get(name)
        if a is None:
            a = self.acc[name] = np.zeros_like(param.data)
            self.mom[name] = np.zeros_like(param.data)
        s = self.mom[name]
        a *= self.decay
        a += (1.0 - self.decay) * grad * grad
        s *= self.momentum
        s += lr * grad / np.sqrt(a + self.eps)
        param.data -= s

    def hyperparams(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "momentum", "decay", "eps", "lr_step", "lr_factor")}


@dataclass
class BatchLosses:
    grasp: Optional[float] = None
    push: Optional[float] = None
    poke: Optional[float] = None

    def get(self, task: str) -> Optional[float]:
        return getattr(self, task)


def task_loss(net: MultiTaskNet, task: str, batch, training: bool = True,
              rng: Optional[np.random.Generator] = None) -> ad.Tensor:
    """Forward one task batch through the network and return its mean loss."""
    if task == "grasp":
        patch, theta, y = batch
        return grasp_loss(net.grasp_forward(patch, training, rng), theta, y)
    if task == "push":
        begin, end, target = batch
        return push_loss(net.push_forward(begin, end, training, rng), target)
    if task == "poke":
        image, target = batch
        return poke_loss(net.poke_forward(image, training, rng), target)
    raise ContractError(f"unknown task {task!r}")


def dropout_rng(seed: int, iteration: int, task: str) -> np.random.Generator:
    """Independent dropout stream per (run seed, iteration, task)."""
    return np.random.default_rng([seed, iteration, TASK_INDEX[task]])


def _check_batches(batches: Mapping) -> list:
    present = [t for t in TASKS if batches.get(t) is not None]
    unknown = set(batches) - set(TASKS)
    if unknown:
        raise ContractError(f"unknown task batches: {sorted(unknown)}")
    if not present:
        raise ContractError("joint_step needs at least one task batch")
    return present


def compute_gradients(net: MultiTaskNet, batches: Mapping, dropout_seed: int = 0,
                      iteration: int = 0) -> BatchLosses:
    """Backpropagate L_BG + L_BP + L_BPoke over the present tasks, filling ``.grad``.

    Head parameters of absent tasks are not in the graph and keep ``grad=None``.
    """
    present = _check_batches(batches)
    net.params.zero_grad()
    losses = BatchLosses()
    total = None
    for task in present:
        loss = task_loss(net, task, batches[task], True, dropout_rng(dropout_seed, iteration, task))
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"{task} loss is {value} at iteration {iteration}")
        setattr(losses, task, value)
        total = loss if total is None else ad.add(total, loss)
    ad.backward(total)
    return losses


def joint_step(net: MultiTaskNet, opt: RmsProp, batches: Mapping, dropout_seed: int = 0) -> BatchLosses:
    """One multi-task update.

    The trunk moves along the summed gradient of all present task losses; each
    head moves only along its own task's gradient. Heads of absent tasks are
    frozen, optimizer state included.
    """
    losses = compute_gradients(net, batches, dropout_seed, opt.iteration)
    lr = opt.learning_rate()
    for group in ("trunk",) + tuple(t for t in TASKS if losses.get(t) is not None):
        for name, p in net.params.group(group).items():
            opt.update(name, p, p.grad, lr)
    opt.iteration += 1
    return losses
