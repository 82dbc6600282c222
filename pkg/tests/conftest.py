"""Shared verification helpers: finite-difference gradients and adjoint checks.

Both are independent oracles: they never call into the tape machinery they
verify (numeric_grad only re-runs forward passes).
"""

import numpy as np

from clearstream import tensor as T


def numeric_grad(loss_fn, t, h=1e-5):
    """Central finite differences of scalar loss_fn with respect to tensor t.

    loss_fn is re-evaluated with t.data perturbed in place, so it must read
    t.data fresh on every call and must not cache forward results.
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-2):
    """Max absolute deviation scaled by the larger gradient magnitude.

    The floor keeps finite-difference roundoff on near-zero gradients from
    registering as relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(build_loss, wrt, h=1e-5):
    """Compare tape gradients of build_loss() against central differences.

    build_loss must construct the forward pass from scratch (reading current
    .data of the wrt tensors) and return a scalar Tensor. Returns the worst
    max_rel_error across the wrt tensors.
    """
    for p in wrt:
        p.zero_grad()
    tape = T.Tape()
    with tape:
        loss = build_loss()
    tape.backward(loss)
    worst = 0.0
    for p in wrt:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: build_loss().item(), p, h=h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def adjoint_gap(apply_fwd, apply_adj, x, y):
    """Relative gap of <L(x), y> vs <x, L^T(y)> for numpy arrays x, y."""
    lhs = float(np.vdot(apply_fwd(x), y))
    rhs = float(np.vdot(x, apply_adj(y)))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)
