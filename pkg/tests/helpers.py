"""Finite-difference gradient oracle shared by the test modules."""

import numpy as np

from pact import autodiff as ad

FD_STEP = 1e-5
FD_RTOL = 1e-5
FD_ATOL = 1e-8


def numeric_grad(f, arr, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        up = f()
        arr[i] = old - step
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def max_violation(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
    """Largest excess of |a - n| over max(atol, rtol * max(|a|, |n|)); <= 0 passes."""
    err = np.abs(analytic - numeric)
    allowed = np.maximum(atol, rtol * np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((err - allowed).max()) if err.size else 0.0


def check_grads(build, params, rtol=FD_RTOL, atol=FD_ATOL):
    """``build()`` returns a scalar Tensor using ``params`` (leaf Tensors).

    Compares reverse-mode adjoints with central differences; returns the
    worst violation (<= 0 means every entry is within tolerance).
    """
    for p in params:
        p.zero_grad()
    with ad.new_tape():
        out = build()
        out.backward()
    worst = -np.inf
    for p in params:
        def f():
            with ad.no_grad():
                return float(build().value)
        num = numeric_grad(f, p.value)
        worst = max(worst, max_violation(p.adjoint, num, rtol, atol))
    return worst


def project(t, seed=0):
    """Fixed random linear functional so every output entry is exercised."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return (t * w).sum()
