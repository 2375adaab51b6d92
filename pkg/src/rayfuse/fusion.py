"""Fusing image features into the voxel field along rays.

Four modes. ``single`` touches only anchor voxels (those holding LiDAR
points) with weight 1. ``local_aggregate`` pulls Gaussian-weighted ray
features into each anchor's radius-r ball; ``local_propagate`` pushes each
anchor's fused feature out to the ball. ``ray_wise`` scores every ray voxel
with the sigmoid inner product of the pixel's image feature and a coordinate
embedding, keeps the top quarter (by pre-fusion occupancy count), and adds
the weighted fused feature, creating features in previously empty voxels.
Supervision for the scores is a per-anchor 3D Gaussian, cut to zero beyond
the radius, trained with focal loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MLP,
    Conv2d,
    Module2D,
    Tensor,
    as_tensor,
    concat,
    matmul,
    mul,
    reshape,
    sigmoid,
    transpose,
    tsum,
)
from .losses import focal_loss

LAMBDA_RAY = 5.0
TOP_FRACTION = 0.25
INFER_THRESHOLD = 0.05
FUSION_MODES = ("single", "local_aggregate", "local_propagate", "ray_wise")


@dataclass
class FusionConfig:
    mode: str = "ray_wise"
    radius: float = 1.0  # voxels
    lambda_ray: float = LAMBDA_RAY
    top_fraction: float = TOP_FRACTION
    infer_threshold: float = INFER_THRESHOLD
    sigma: float | None = None  # target/ball width; defaults to radius / 2
    gamma: float = 2.0
    alpha: float = 0.25
    training: bool = True
    stage: int = 1  # only stage-1 geometry is exercised here

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must be in (0, 1]")

    @property
    def target_sigma(self):
        return self.sigma if self.sigma is not None else self.radius / 2.0


@dataclass
class RayWeights:
    """Per-voxel fusion probabilities for one ray, kept in the autodiff graph."""

    ray: object
    omega: Tensor  # shape (len(ray),), each strictly in (0, 1) for finite logits

    def __post_init__(self):
        if self.omega.data.shape != (len(self.ray.voxels),):
            raise ValueError(
                f"weights shape {self.omega.data.shape} does not match ray of {len(self.ray.voxels)} voxels"
            )

    @property
    def values(self):
        return self.omega.data

    def __len__(self):
        return len(self.ray.voxels)


@dataclass(frozen=True)
class Target3D:
    """Supervision weights aligned with one ray's voxels."""

    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("target values must lie in [0, 1]")


def normalized_coords(voxels, grid):
    """Map voxel indices to [0, 1]^3: corner (0,0,0) embeds the zero vector."""
    idx = np.asarray(voxels, dtype=np.float64).reshape(-1, 3)
    span = np.maximum(np.asarray(grid.dims, dtype=np.float64) - 1.0, 1.0)
    return idx / span


def coord_embed(voxel_index, grid, mlp):
    """Coordinate embedding of one voxel, shape (C,)."""
    return mlp(Tensor(normalized_coords([voxel_index], grid)[0]))


def ray_weight(image_feat, voxel_embed):
    """Sigmoid inner product of an image feature and a coordinate embedding."""
    image_feat = as_tensor(image_feat)
    voxel_embed = as_tensor(voxel_embed)
    if image_feat.data.shape != voxel_embed.data.shape:
        raise ValueError(f"feature length {image_feat.data.shape} != embedding {voxel_embed.data.shape}")
    return sigmoid(matmul(image_feat, voxel_embed))


def score_ray(ray, image_feat, mlp, grid):
    """Fusion probability of every voxel on a ray, batched through the MLP."""
    if len(ray.voxels) == 0:
        return RayWeights(ray, Tensor(np.zeros(0)))
    embeds = mlp(Tensor(normalized_coords(ray.voxels, grid)))  # (N, C)
    feat = as_tensor(image_feat)
    logits = tsum(mul(embeds, feat), axis=1)
    return RayWeights(ray, sigmoid(logits))


def make_fuse_conv(channels, out_channels=None, rng=None):
    """The fusion kernel: one 1x1 convolution over concatenated [image, coord] features."""
    rng = rng or np.random.default_rng(0)
    return Module2D([Conv2d(2 * channels, out_channels or channels, 1, rng=rng)])


def make_coord_mlp(channels, rng=None):
    """Three-layer coordinate MLP: 3 -> C -> C -> C."""
    rng = rng or np.random.default_rng(0)
    return MLP([3, channels, channels, channels], rng=rng)


class ViewMLPTable:
    """One coordinate MLP per camera view."""

    def __init__(self, channels, n_views=1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.mlps = [make_coord_mlp(channels, rng) for _ in range(n_views)]

    def for_view(self, view):
        return self.mlps[view]

    def params(self):
        out = []
        for m in self.mlps:
            out.extend(m.params())
        return out


def fused_features(image_feat, embeds, fuse_conv):
    """Per-voxel fused feature f([image_feat, embed]), shape (N, C_out).

    The 1x1 convolution runs over all N voxels at once by treating them as
    spatial positions.
    """
    n = embeds.data.shape[0]
    feat = as_tensor(image_feat)
    tiled = Tensor(np.tile(feat.data[:, None], (1, n)))  # image grad stops here
    stacked = concat([tiled, transpose(embeds)], axis=0)  # (2C, N)
    out = fuse_conv(reshape(stacked, (*stacked.data.shape, 1)))
    return transpose(reshape(out, out.data.shape[:2]))


def gaussian_target_3d(ray, grid, radius, sigma):
    """Anchor-centred Gaussian supervision along a ray, zero beyond the radius.

    Distances are Euclidean in voxel-index units; overlapping anchors take
    the pointwise max; a ray with no anchors gets an all-zero target.
    """
    n = len(ray.voxels)
    if n == 0 or len(ray.anchors) == 0:
        return Target3D(np.zeros(n))
    pos = np.asarray(ray.voxels, dtype=np.float64)
    anchors = np.asarray(ray.anchors, dtype=np.float64)
    d2 = ((pos[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    min_d2 = d2.min(axis=1)
    if sigma > 0:
        vals = np.exp(-min_d2 / (2.0 * sigma**2))
    else:
        vals = (min_d2 == 0.0).astype(np.float64)
    vals[np.sqrt(min_d2) > radius] = 0.0
    vals[min_d2 == 0.0] = 1.0
    return Target3D(vals)


def select_top(scored, occupancy_count, top_fraction=TOP_FRACTION, infer_threshold=None):
    """Pick the k = ceil(top_fraction * occupancy_count) best-scored voxels.

    ``scored`` is a sequence of (voxel_index, score); ties break by ascending
    voxel index. Returns positions into ``scored``. When ``infer_threshold``
    is given, only scores strictly above it are admissible.
    """
    if occupancy_count < 0:
        raise ValueError("occupancy_count must be >= 0")
    k = math.ceil(top_fraction * occupancy_count)
    admissible = [
        i for i, (_, score) in enumerate(scored) if infer_threshold is None or score > infer_threshold
    ]
    admissible.sort(key=lambda i: (-scored[i][1], tuple(scored[i][0])))
    return admissible[: min(k, len(admissible))]


def _commit(field, voxel, weight, feature_row):
    # additive update; a zero weight writes nothing at all
    if weight == 0.0:
        return
    field.add(voxel, weight * feature_row)


def fuse_ray(field, ray, image_feat, mlp, fuse_conv, cfg, weights=None):
    """Ray-wise fusion of a single ray into a copy of the field.

    ``weights`` may carry precomputed scores (e.g. shared with the loss);
    otherwise the ray is scored here.
    """
    if cfg.mode != "ray_wise":
        raise ValueError("fuse_ray runs in ray_wise mode; see fuse_single / fuse_local")
    out = field.copy()
    if len(ray.voxels) == 0:
        return out
    if weights is None:
        weights = score_ray(ray, image_feat, mlp, grid=field.grid)
    scored = list(zip(ray.voxels, weights.values))
    thr = None if cfg.training else cfg.infer_threshold
    picked = select_top(scored, len(field.occupancy), cfg.top_fraction, thr)
    if not picked:
        return out
    embeds = mlp(Tensor(normalized_coords([ray.voxels[i] for i in picked], field.grid)))
    updates = fused_features(image_feat, embeds, fuse_conv).data
    for row, i in enumerate(picked):
        _commit(out, ray.voxels[i], weights.values[i], updates[row])
    return out


def fuse_rays(field, rays, image_feats, mlp, fuse_conv, cfg, weights_list=None):
    """Ray-wise fusion of a whole frame with one global top-quarter selection.

    Candidates from every ray compete for k = ceil(top_fraction * pre-fusion
    occupancy) slots; updates are committed in ascending (ray, position)
    order so results are independent of scoring parallelism. Returns
    (fused field, per-ray weights, selected (ray_index, position) pairs).
    """
    if weights_list is None:
        weights_list = [score_ray(ray, feat, mlp, field.grid) for ray, feat in zip(rays, image_feats)]
    scored = []
    entry_pos = []
    for ri, (ray, w) in enumerate(zip(rays, weights_list)):
        for pos, (voxel, score) in enumerate(zip(ray.voxels, w.values)):
            scored.append((voxel, score))
            entry_pos.append((ri, pos))
    thr = None if cfg.training else cfg.infer_threshold
    picked = select_top(scored, len(field.occupancy), cfg.top_fraction, thr)
    chosen = sorted(entry_pos[i] for i in picked)

    out = field.copy()
    by_ray: dict[int, list[int]] = {}
    for ri, pos in chosen:
        by_ray.setdefault(ri, []).append(pos)
    for ri in sorted(by_ray):
        ray, w = rays[ri], weights_list[ri]
        positions = by_ray[ri]
        embeds = mlp(Tensor(normalized_coords([ray.voxels[p] for p in positions], field.grid)))
        updates = fused_features(image_feats[ri], embeds, fuse_conv).data
        for row, pos in enumerate(positions):
            _commit(out, ray.voxels[pos], w.values[pos], updates[row])
    return out, weights_list, chosen


def fuse_single(field, ray, image_feat, mlp, fuse_conv):
    """Point-to-point fusion: anchors only, weight 1."""
    out = field.copy()
    if not ray.anchors:
        return out
    embeds = mlp(Tensor(normalized_coords(ray.anchors, field.grid)))
    updates = fused_features(image_feat, embeds, fuse_conv).data
    for anchor, row in zip(ray.anchors, updates):
        _commit(out, anchor, 1.0, row)
    return out


def fuse_local(field, ray, image_feat, mlp, fuse_conv, mode, radius, sigma=None):
    """Gaussian-ball fusion around anchors, aggregate or propagate flavour.

    aggregate: each anchor collects weighted features of ray voxels within
    its ball. propagate: each ball voxel receives the anchor's fused feature,
    weighted. Voxels outside every ball are untouched. radius 0 reduces both
    to fuse_single.
    """
    if mode not in ("aggregate", "propagate"):
        raise ValueError(f"local fusion mode must be aggregate or propagate, got {mode!r}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    sigma = radius / 2.0 if sigma is None else sigma
    out = field.copy()
    if not ray.anchors or len(ray.voxels) == 0:
        return out
    embeds = mlp(Tensor(normalized_coords(ray.voxels, field.grid)))
    updates = fused_features(image_feat, embeds, fuse_conv).data
    row_of = {v: i for i, v in enumerate(ray.voxels)}
    pos = np.asarray(ray.voxels, dtype=np.float64)
    for anchor in ray.anchors:
        dist = np.sqrt(((pos - np.asarray(anchor, dtype=np.float64)) ** 2).sum(axis=1))
        for i in np.flatnonzero(dist <= radius):
            d = dist[i]
            g = 1.0 if d == 0.0 else math.exp(-(d**2) / (2.0 * sigma**2))
            if mode == "aggregate":
                _commit(out, anchor, g, updates[i])
            else:
                _commit(out, ray.voxels[i], g, updates[row_of[anchor]])
    return out


def ray_loss(weights_list, targets_list, lambda_ray=LAMBDA_RAY, gamma=2.0, alpha=0.25):
    """Weighted mean focal loss over every (ray, voxel) element of the ray set."""
    if len(weights_list) != len(targets_list):
        raise ValueError("weights/targets list length mismatch")
    pieces = [w.omega for w in weights_list if len(w) > 0]
    targets = [t.values for w, t in zip(weights_list, targets_list) if len(w) > 0]
    m = sum(p.data.size for p in pieces)
    if m == 0:
        raise ValueError("ray set is empty")
    omega = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    target = Tensor(np.concatenate(targets))
    return mul(Tensor(np.array(lambda_ray)), focal_loss(omega, target, gamma=gamma, alpha=alpha))
