"""Central-difference gradient oracle, independent of the tape's backward pass."""

from __future__ import annotations

from typing import Callable

import numpy as np

from edgedistill import tape as T
from edgedistill.tape import Tape


def numeric_gradients(
    loss_fn: Callable[[dict[str, T.Tensor], Tape], T.Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Finite differences of ``loss_fn`` with respect to every parameter entry.

    ``loss_fn`` must rebuild the whole forward pass from the raw parameter
    arrays each call, so this never touches the analytic backward code.
    """

    def evaluate() -> float:
        tape = Tape(freeze_boundary=0)
        leaves = {k: tape.leaf(v, key=k, layer=0) for k, v in params.items()}
        return float(loss_fn(leaves, tape).data.reshape(-1)[0])

    grads = {}
    for key, p in params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        grads[key] = num
    return grads


def analytic_gradients(
    loss_fn: Callable[[dict[str, T.Tensor], Tape], T.Tensor],
    params: dict[str, np.ndarray],
    freeze_boundary: int = 0,
    layers: dict[str, int] | None = None,
) -> dict[str, np.ndarray]:
    tape = Tape(freeze_boundary=freeze_boundary)
    leaves = {
        k: tape.leaf(v, key=k, layer=(layers or {}).get(k, 0)) for k, v in params.items()
    }
    loss_fn(leaves, tape)
    return T.backward_partial(tape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
