"""Per-task batch losses: binary cross-entropy on the attempted angle, squared L2 for regression."""
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .net import GRASP_ANGLES


def grasp_loss(logits: Tensor, theta_d, y) -> Tensor:
    """Mean BCE over the batch, reading only the logit of each attempted angle.

    The other 17 logits of a row get zero gradient from that row.
    """
    theta_d = np.asarray(theta_d)
    y = np.asarray(y, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != GRASP_ANGLES:
        raise DimensionError(f"grasp logits must be (N, {GRASP_ANGLES}), got {logits.shape}")
    if theta_d.size and (theta_d.min() < 0 or theta_d.max() >= GRASP_ANGLES):
        raise IndexError(f"theta_D out of range 0..{GRASP_ANGLES - 1}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("grasp labels must be 0 or 1")
    picked = ad.gather_rows(logits, theta_d)
    return ad.mean(ad.bce_with_logits(picked, y))


def _squared_l2(pred: Tensor, target, what: str) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} vs target {target.shape}")
    diff = ad.sub(pred, Tensor(target))
    per_element = ad.sum(ad.square(diff), axis=1)
    return ad.mean(per_element)


def push_loss(pred: Tensor, target) -> Tensor:
    """Mean over the batch of the (unhalved) squared distance between 5-vectors."""
    return _squared_l2(pred, target, "push_loss")


def poke_loss(pred: Tensor, target) -> Tensor:
    return _squared_l2(pred, target, "poke_loss")
