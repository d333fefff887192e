"""Finite-difference verification of tape gradients."""

import numpy as np

from .core import Tape, Tensor


def gradient_check(fn, inputs, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    `fn` must return a scalar Tensor and must read the *current* data of each
    input tensor on every call (the checker perturbs them in place). Relative
    error uses denominator max(|analytic|, |numeric|, 1e-8). Run in the
    high-precision mode: float32 round-off swamps the differences.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("gradient_check: fn must return a scalar Tensor")
        if not np.isfinite(out.data).all():
            raise ValueError("gradient_check: fn produced a non-finite value")
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    def value():
        v = fn(*inputs)
        if not np.isfinite(v.data).all():
            raise ValueError("gradient_check: fn produced a non-finite value")
        return float(v.data.reshape(-1)[0])

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(float(aflat[i])), abs(num), 1e-8)
            err = abs(float(aflat[i]) - num) / denom
            if err > max_err:
                max_err = err
    return max_err
