"""Shared test helpers: finite-difference gradient oracle and tolerances."""

import numpy as np

from crossrisk.tensor import Tape, Tensor, backward

FD_STEP = 1e-5


def fd_gradient(func, tensors, index, step=FD_STEP):
    """Central finite differences of scalar ``func(*tensors)`` w.r.t. one input.

    Independent of the tape: re-evaluates the function with perturbed copies.
    """
    base = [t.data.copy() for t in tensors]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    for k in range(flat.size):
        plus = [b.copy() for b in base]
        minus = [b.copy() for b in base]
        plus[index].reshape(-1)[k] += step
        minus[index].reshape(-1)[k] -= step
        f_plus = func(*[Tensor(b) for b in plus]).item()
        f_minus = func(*[Tensor(b) for b in minus]).item()
        flat[k] = (f_plus - f_minus) / (2.0 * step)
    return grad


def tape_gradients(func, tensors):
    """Run ``func`` under a tape and return gradients aligned with ``tensors``."""
    with Tape() as tape:
        loss = func(*tensors)
    grads = backward(tape, loss)
    return [grads[t.tid].data if t.tid in grads else np.zeros(t.shape) for t in tensors]


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(func, tensors, tol=1e-4, step=FD_STEP):
    """Assert tape gradients match the finite-difference oracle for every input."""
    tape_g = tape_gradients(func, tensors)
    for i in range(len(tensors)):
        fd = fd_gradient(func, tensors, i, step=step)
        err = max_rel_err(tape_g[i], fd)
        assert err < tol, f"input {i}: max rel err {err:.3e} >= {tol}"
