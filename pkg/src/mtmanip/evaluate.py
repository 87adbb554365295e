"""Evaluation metrics: grasp classification error and push/poke mean squared error."""
import numpy as np

from .autodiff import no_grad
from .errors import ContractError
from .net import MultiTaskNet

EVAL_BATCH = 128


def _chunks(n: int, size: int = EVAL_BATCH):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def _nonempty(ds, what: str) -> None:
    if ds is None or len(ds) == 0:
        raise ContractError(f"{what}: empty dataset")


def grasp_error_from_logits(logits: np.ndarray, theta: np.ndarray, y: np.ndarray) -> float:
    """Fraction of records where (sig(logit[theta]) > 0.5) disagrees with y.

    sig(z) > 0.5 exactly when z > 0, so a zero logit predicts failure.
    """
    picked = logits[np.arange(len(theta)), np.asarray(theta, dtype=np.intp)]
    pred = picked > 0.0
    return float(np.mean(pred != (np.asarray(y) == 1)))


def predict_grasp(net: MultiTaskNet, ds) -> np.ndarray:
    out = []
    with no_grad():
        for sl in _chunks(len(ds)):
            patch, _, _ = ds.batch(sl)
            out.append(net.grasp_forward(patch, training=False).data)
    return np.concatenate(out)


def eval_grasp(net: MultiTaskNet, ds) -> float:
    _nonempty(ds, "eval_grasp")
    return grasp_error_from_logits(predict_grasp(net, ds), ds.theta, ds.y)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over records of the squared L2 distance (same formula as the training loss)."""
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def predict_push(net: MultiTaskNet, ds) -> np.ndarray:
    out = []
    with no_grad():
        for sl in _chunks(len(ds)):
            begin, end, _ = ds.batch(sl)
            out.append(net.push_forward(begin, end, training=False).data)
    return np.concatenate(out)


def eval_push(net: MultiTaskNet, ds) -> float:
    _nonempty(ds, "eval_push")
    return mse(predict_push(net, ds), ds.action)


def predict_poke(net: MultiTaskNet, ds) -> np.ndarray:
    out = []
    with no_grad():
        for sl in _chunks(len(ds)):
            image, _ = ds.batch(sl)
            out.append(net.poke_forward(image, training=False).data)
    return np.concatenate(out)


def eval_poke(net: MultiTaskNet, ds) -> float:
    _nonempty(ds, "eval_poke")
    return mse(predict_poke(net, ds), ds.response)


EVALUATORS = {"grasp": eval_grasp, "push": eval_push, "poke": eval_poke}
METRIC_NAMES = {"grasp": "grasp_error", "push": "push_mse", "poke": "poke_mse"}
