"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import backward, zero_grads


def finite_diff_grad_check(loss_fn, params, h=1e-5, n_samples=100, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic zero-argument callable rebuilding the
    forward graph from the current parameter values and returning a scalar
    Tensor. Up to ``n_samples`` coordinates are drawn across ``params``; the
    error at each is |analytic - numeric| / max(1, |analytic|).
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)

    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > n_samples:
        picked = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[int(k)] for k in picked]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = float(loss_fn().data)
        flat[j] = orig - h
        f_minus = float(loss_fn().data)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
