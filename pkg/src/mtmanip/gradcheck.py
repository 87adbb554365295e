"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .autodiff import Graph, Tensor, backward, no_grad
from .autodiff.ops import record_relu_masks


@dataclass
class GradCheckResult:
    max_error: float
    worst: str
    n_checked: int
    n_kinks: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_error <= tol


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-5,
              coords_per_tensor: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              skip_kinks: bool = True) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    With ``coords_per_tensor`` set, that many random coordinates are probed in
    each tensor; otherwise every coordinate is.

    A probe whose +h or -h evaluation flips any ReLU relative to the
    unperturbed pass straddles a kink, where the central difference is not a
    derivative estimate. With ``skip_kinks`` such probes are counted in
    ``n_kinks`` and replaced by another coordinate.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with record_relu_masks() as base_masks:
        loss = loss_fn()
    for t in Graph.from_output(loss).tensors:
        if t.is_leaf:
            t.grad = None
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None

    worst, worst_name, count, kinks = 0.0, "", 0, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            queue = list(range(flat.size))
            want = flat.size
        else:
            queue = list(rng.permutation(flat.size))
            want = coords_per_tensor
        ga = analytic[name].reshape(-1)
        done = 0
        for i in queue:
            if done >= want:
                break
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                with record_relu_masks() as mp:
                    fp = loss_fn().item()
                flat[i] = orig - h
                with record_relu_masks() as mm:
                    fm = loss_fn().item()
            flat[i] = orig
            if skip_kinks and not (_same_masks(base_masks, mp) and _same_masks(base_masks, mm)):
                kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            err = abs(ga[i] - num) / max(1.0, abs(num))
            count += 1
            done += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{int(i)}]"
    return GradCheckResult(worst, worst_name, count, kinks)
