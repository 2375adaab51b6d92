"""Choosing which feature-map pixels get a ray.

The feature map is tiled into non-overlapping windows; windows holding no
projected LiDAR point are discarded. Pixels are then drawn either by one of
three heuristics (uniformity, density, sparsity of projected points per
window) or by the learnable importance head: a small conv stack whose
sigmoid response gates pixels at 0.5, trained against per-box 2D Gaussian
targets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Module2D, ReLU, Tensor, as_tensor, mul, reshape, sigmoid
from .losses import bce_loss

WINDOW_SIZE = 64
SCORE_THRESHOLD = 0.5
LAMBDA_SAMPLER = 2.0
HEURISTIC_MODES = ("uniformity", "density", "sparsity")


@dataclass(frozen=True)
class Window:
    bounds: tuple[int, int, int, int]  # (u0, v0, u1, v1), half-open
    count: int

    @property
    def area(self):
        u0, v0, u1, v1 = self.bounds
        return (u1 - u0) * (v1 - v0)


@dataclass(frozen=True)
class WindowPartition:
    window: int
    feature_dims: tuple[int, int]  # (H, W)
    windows: tuple[Window, ...]

    def nonempty(self):
        return [w for w in self.windows if w.count > 0]


@dataclass(frozen=True)
class PixelSampleSet:
    pixels: tuple[tuple[int, int], ...]
    scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(set(self.pixels)) != len(self.pixels):
            raise ValueError("sampled pixels must be unique")

    def __len__(self):
        return len(self.pixels)


@dataclass(frozen=True)
class Target2D:
    map: np.ndarray  # (H, W), values in [0, 1], indexed [v, u]


def partition_windows(feature_dims, projected_points, window=WINDOW_SIZE):
    """Tile the feature map into windows and count projected points per window.

    ``projected_points`` holds integer feature-grid (u, v) pixels; points
    outside the map are ignored. Edge windows may be smaller than ``window``.
    """
    if window < 1:
        raise ValueError("window size must be >= 1")
    h, w = feature_dims
    nu = -(-w // window)
    nv = -(-h // window)
    counts = np.zeros((nv, nu), dtype=np.int64)
    for u, v in projected_points:
        if 0 <= u < w and 0 <= v < h:
            counts[v // window, u // window] += 1
    windows = []
    for wv in range(nv):
        for wu in range(nu):
            bounds = (wu * window, wv * window, min((wu + 1) * window, w), min((wv + 1) * window, h))
            windows.append(Window(bounds, int(counts[wv, wu])))
    return WindowPartition(window, (h, w), tuple(windows))


def _draw_in_window(win, k, rng):
    u0, v0, u1, v1 = win.bounds
    flat = rng.choice(win.area, size=k, replace=False)
    du, dv = flat % (u1 - u0), flat // (u1 - u0)
    return [(int(u0 + a), int(v0 + b)) for a, b in zip(du, dv)]


def heuristic_sample(partition, mode, n, rng):
    """Draw up to n unique pixels from kept windows.

    Window draw probabilities: uniformity = equal per kept window, density
    proportional to projected-point count, sparsity proportional to 1/count.
    Within a window pixels are uniform without replacement. Returns exactly
    min(n, total kept area) pixels; no kept windows gives an empty set.
    """
    if mode not in HEURISTIC_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    kept = partition.nonempty()
    if not kept:
        return PixelSampleSet(())
    if mode == "uniformity":
        weights = np.ones(len(kept))
    elif mode == "density":
        weights = np.array([w.count for w in kept], dtype=np.float64)
    else:
        weights = np.array([1.0 / w.count for w in kept], dtype=np.float64)

    capacity = np.array([w.area for w in kept])
    want = min(n, int(capacity.sum()))
    taken = np.zeros(len(kept), dtype=np.int64)
    remaining = want
    active = np.ones(len(kept), dtype=bool)
    while remaining > 0:
        p = np.where(active, weights, 0.0)
        p = p / p.sum()
        quota = rng.multinomial(remaining, p) + taken
        clipped = np.minimum(quota, capacity)
        remaining = int(want - clipped.sum())
        taken = clipped
        active = taken < capacity

    pixels = []
    for win, k in zip(kept, taken):
        if k > 0:
            pixels.extend(_draw_in_window(win, int(k), rng))
    return PixelSampleSet(tuple(pixels))


def make_sampler_head(channels, rng=None):
    """Three stacked 3x3 convolutions: C -> C -> C -> 1, ReLU between."""
    rng = rng or np.random.default_rng(0)
    return Module2D(
        [
            Conv2d(channels, channels, 3, rng=rng),
            ReLU(),
            Conv2d(channels, channels, 3, rng=rng),
            ReLU(),
            Conv2d(channels, 1, 3, rng=rng),
        ]
    )


def head_scores(feature, head):
    """Sigmoid response map of the importance head, shape (H, W)."""
    out = sigmoid(head(as_tensor(feature)))
    if out.data.shape[0] != 1:
        raise ValueError(f"importance head must output 1 channel, got {out.data.shape[0]}")
    return reshape(out, out.data.shape[1:])


def importance_sample(feature, head, partition, n, rng):
    """Uniform draw over pixels whose head response beats 0.5 in kept windows."""
    scores = head_scores(feature, head).data
    keep_mask = np.zeros(partition.feature_dims, dtype=bool)
    for win in partition.nonempty():
        u0, v0, u1, v1 = win.bounds
        keep_mask[v0:v1, u0:u1] = True
    vs, us = np.nonzero((scores > SCORE_THRESHOLD) & keep_mask)
    if us.size == 0:
        return PixelSampleSet(())
    order = np.lexsort((us, vs))
    us, vs = us[order], vs[order]
    take = min(n, us.size)
    picked = np.sort(rng.choice(us.size, size=take, replace=False))
    pixels = tuple((int(us[i]), int(vs[i])) for i in picked)
    return PixelSampleSet(pixels, tuple(float(scores[vs[i], us[i]]) for i in picked))


def gaussian_target_2d(boxes2d, dims):
    """Per-box 2D Gaussian heatmap: 1 at each center, 0 outside all boxes.

    Boxes are (u0, v0, u1, v1) in feature pixels; sigma is the box diagonal
    over 6 so the boundary sits near three sigma. Overlaps take the
    pointwise max. Degenerate boxes are skipped with a warning.
    """
    h, w = dims
    out = np.zeros((h, w))
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    for box in boxes2d:
        u0, v0, u1, v1 = (float(b) for b in box)
        if u1 <= u0 or v1 <= v0:
            warnings.warn(f"skipping degenerate 2d box {box}", stacklevel=2)
            continue
        cu, cv = (u0 + u1) / 2.0, (v0 + v1) / 2.0
        sigma = float(np.hypot(u1 - u0, v1 - v0)) / 6.0
        inside = (uu >= u0) & (uu <= u1) & (vv >= v0) & (vv <= v1)
        g = np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * sigma**2))
        out = np.maximum(out, np.where(inside, g, 0.0))
    return Target2D(out)


def sampler_loss(pred, target):
    """Weighted BCE between the head's probability map and the Gaussian target."""
    pred = as_tensor(pred)
    tmap = target.map if isinstance(target, Target2D) else np.asarray(target)
    if pred.data.shape != tmap.shape:
        raise ValueError(f"pred/target shape mismatch: {pred.data.shape} vs {tmap.shape}")
    return mul(Tensor(np.array(LAMBDA_SAMPLER)), bce_loss(pred, Tensor(tmap)))
