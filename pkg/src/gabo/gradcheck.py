"""Finite-difference oracles for first- and second-order gradient checks.

Everything here evaluates forward passes only, so it stays independent of
the backward rules it is used to verify.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, grad

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_FLOOR = 1e-8


def fd_gradient(f, arrays, step=FD_STEP):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each array.

    ``f`` receives plain float64 arrays and returns a float.
    """
    grads = []
    for k, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = [np.array(a, dtype=np.float64) for a in arrays]
            bumped[k].reshape(-1)[i] += step
            hi = f(bumped)
            bumped[k].reshape(-1)[i] -= 2 * step
            lo = f(bumped)
            flat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def fd_hvp(f, arrays, vectors, step=FD_STEP):
    """Hessian-vector products by central differences of analytic gradients.

    ``f(tensors) -> scalar Tensor`` is evaluated on tape leaves; the
    first-order gradient comes from the reverse pass, the directional
    second derivative from differencing it. Used as the oracle for every
    grad-of-grad path.
    """
    def grad_at(offsets):
        tape = Tape()
        leaves = [tape.leaf(np.asarray(a, dtype=np.float64) + d)
                  for a, d in zip(arrays, offsets)]
        out = f(leaves)
        return [g.data for g in grad(out, leaves)]

    plus = grad_at([step * np.asarray(v) for v in vectors])
    minus = grad_at([-step * np.asarray(v) for v in vectors])
    return [(p - m) / (2 * step) for p, m in zip(plus, minus)]


def max_rel_error(approx, exact, floor=FD_FLOOR) -> float:
    """Largest elementwise relative error with a floored denominator."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(approx), np.abs(exact)), floor)
    if approx.size == 0:
        return 0.0
    return float(np.max(np.abs(approx - exact) / denom))


def check_gradient(f, arrays, step=FD_STEP) -> float:
    """Max relative error between reverse-mode and finite-difference gradients.

    ``f(tensors) -> scalar Tensor``.
    """
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(leaves)
    analytic = [g.data for g in grad(out, leaves)]

    def forward(arrs):
        t2 = Tape()
        return f([t2.leaf(a) for a in arrs]).item()

    numeric = fd_gradient(forward, arrays, step=step)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


def check_second_order(f, arrays, vectors, step=FD_STEP) -> float:
    """Max relative error of grad-of-grad against the fd Hessian-vector oracle.

    Compares d/dx [sum_k <grad f, v_k>] computed by a second reverse pass
    with finite differences of first gradients.
    """
    from .autodiff import add, mul, tsum

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(leaves)
    gs = grad(out, leaves, create_graph=True)
    dot = None
    for g, v in zip(gs, vectors):
        term = tsum(mul(g, Tensor(np.asarray(v, dtype=np.float64))))
        dot = term if dot is None else add(dot, term)
    analytic = [h.data for h in grad(dot, leaves)]
    numeric = fd_hvp(f, arrays, vectors, step=step)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
