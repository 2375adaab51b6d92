"""Binary cross-entropy and focal loss on probability tensors.

Both take predictions already in (0, 1) (post-sigmoid) and soft targets in
[0, 1]. Predictions are clamped to [EPS, 1 - EPS] before any log so exact
0/1 inputs stay finite. Default reduction is the mean over elements; pass
``reduction="none"`` for the per-element map.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, as_tensor, clip, log, mul, power, sub, tmean

EPS = 1e-7


def _check_pair(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred/target shape mismatch: {pred.shape} vs {target.shape}")
    if np.any(target.data < 0.0) or np.any(target.data > 1.0):
        raise ValueError("target values must lie in [0, 1]")
    return pred, target


def bce_elements(pred, target):
    """Per-element binary cross-entropy, no reduction."""
    pred, target = _check_pair(pred, target)
    p = clip(pred, EPS, 1.0 - EPS)
    one_minus_t = sub(Tensor(np.ones_like(target.data)), target)
    one_minus_p = sub(Tensor(np.ones_like(p.data)), p)
    return sub(Tensor(np.zeros_like(p.data)), add(mul(target, log(p)), mul(one_minus_t, log(one_minus_p))))


def bce_loss(pred, target):
    """Mean binary cross-entropy. Always >= 0."""
    return tmean(bce_elements(pred, target))


def focal_elements(pred, target, gamma=2.0, alpha=0.25):
    """Per-element focal loss with soft targets.

    FL(p, y) = -alpha * y * (1-p)^gamma * log(p)
               - (1-alpha) * (1-y) * p^gamma * log(1-p)

    At gamma=0, alpha=0.5 this is exactly 0.5 * BCE per element.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    pred, target = _check_pair(pred, target)
    p = clip(pred, EPS, 1.0 - EPS)
    one_minus_t = sub(Tensor(np.ones_like(target.data)), target)
    one_minus_p = sub(Tensor(np.ones_like(p.data)), p)
    pos = mul(mul(target, power(one_minus_p, gamma)), log(p))
    neg = mul(mul(one_minus_t, power(p, gamma)), log(one_minus_p))
    return sub(
        Tensor(np.zeros_like(p.data)),
        add(mul(Tensor(np.full_like(p.data, alpha)), pos), mul(Tensor(np.full_like(p.data, 1.0 - alpha)), neg)),
    )


def focal_loss(pred, target, gamma=2.0, alpha=0.25):
    """Mean focal loss over elements."""
    return tmean(focal_elements(pred, target, gamma=gamma, alpha=alpha))
