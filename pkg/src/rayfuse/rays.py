"""Per-pixel voxel rays: every voxel whose center projects into one feature cell.

Membership is defined purely by the projection predicate (floor-projected
pixel equality with positive depth). Construction walks the grid slab by
slab along the dominant beam axis; each slab's candidate box is the AABB of
the pixel beam's corner-ray crossings, padded by one voxel, and candidates
are then filtered by the exact predicate. A brute-force full-grid scan with
the same predicate serves as the verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORACLE_VOXEL_LIMIT = 64**3


@dataclass(frozen=True)
class Ray:
    """Depth-ordered voxels behind one feature pixel, plus LiDAR-occupied anchors."""

    pixel: tuple[int, int]
    voxels: tuple[tuple[int, int, int], ...]
    depths: np.ndarray
    anchors: tuple[tuple[int, int, int], ...] = ()

    def __len__(self):
        return len(self.voxels)

    def anchor_positions(self):
        lookup = {v: i for i, v in enumerate(self.voxels)}
        return [lookup[a] for a in self.anchors]


def _predicate_filter(vt, pixel, candidates):
    """Exact membership: depth > 0 and floor projection equals the pixel."""
    if candidates.shape[0] == 0:
        return [], np.zeros(0)
    uv, depth = vt.project_voxels(candidates)
    hit = (depth > 0) & (uv[:, 0] == pixel[0]) & (uv[:, 1] == pixel[1])
    return candidates[hit], depth[hit]


def _order(voxels, depths):
    if len(voxels) == 0:
        return (), np.zeros(0)
    keys = sorted(range(len(voxels)), key=lambda i: (depths[i], tuple(voxels[i])))
    ordered = tuple(tuple(int(x) for x in voxels[i]) for i in keys)
    return ordered, np.array([depths[i] for i in keys])


def brute_force_ray_oracle(vt, grid, pixel):
    """Scan every voxel in the grid with the projection predicate."""
    if grid.n_voxels > ORACLE_VOXEL_LIMIT:
        raise ValueError(f"grid of {grid.n_voxels} voxels exceeds the oracle cost guard")
    voxels, depths = _predicate_filter(vt, pixel, grid.all_indices())
    ordered, d = _order(voxels, depths)
    return Ray(tuple(pixel), ordered, d)


def construct_ray(vt, grid, pixel):
    """All voxels projecting into one feature pixel, nearest first.

    The pixel must lie on the feature map; a beam that misses the grid gives
    an empty (still valid) ray.
    """
    if not vt.in_feature_bounds(pixel):
        raise ValueError(f"pixel {pixel} outside feature dims {vt.feature_dims}")
    u, v = pixel
    s = vt.stride
    corners_px = [(u * s, v * s), ((u + 1) * s, v * s), (u * s, (v + 1) * s), ((u + 1) * s, (v + 1) * s)]
    center = vt.camera_center()
    dirs = np.array([vt.pixel_ray(pu, pv)[1] for pu, pv in corners_px])

    axis = int(np.argmax(np.abs(dirs).sum(axis=0)))
    if np.any(np.abs(dirs[:, axis]) < 1e-12) or len(set(np.sign(dirs[:, axis]))) != 1:
        # beam straddles the slab direction: degenerate camera, scan everything
        voxels, depths = _predicate_filter(vt, pixel, grid.all_indices())
        ordered, d = _order(voxels, depths)
        return Ray(tuple(pixel), ordered, d)

    origin = np.asarray(grid.origin)
    size = np.asarray(grid.voxel_size)
    dims = np.asarray(grid.dims)
    boxes: list[np.ndarray] = []
    for k in range(int(dims[axis])):
        faces = (origin[axis] + k * size[axis], origin[axis] + (k + 1) * size[axis])
        ts = np.array([[(f - center[axis]) / d[axis] for f in faces] for d in dirs])
        if ts.max() <= 0:
            continue  # slab entirely behind the camera
        pts = [center + t * d for d, row in zip(dirs, ts) for t in row if t > 0]
        if ts.min() <= 0:
            pts.append(center)  # camera sits inside or behind this slab
        box = np.stack(pts)
        lo = grid.index_of(box.min(axis=0)) - 1
        hi = grid.index_of(box.max(axis=0)) + 1
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, dims - 1)
        lo[axis] = max(k - 1, 0)
        hi[axis] = min(k + 1, dims[axis] - 1)
        if np.any(lo > hi):
            continue
        ii, jj, kk = np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij")
        boxes.append(np.stack([ii, jj, kk], axis=-1).reshape(-1, 3))

    if not boxes:
        return Ray(tuple(pixel), (), np.zeros(0))
    candidates = np.unique(np.concatenate(boxes, axis=0), axis=0)
    voxels, depths = _predicate_filter(vt, pixel, candidates)
    ordered, d = _order(voxels, depths)
    return Ray(tuple(pixel), ordered, d)


def mark_anchors(ray, voxel_field):
    """Tag the ray's voxels that contain LiDAR points, order preserved."""
    anchors = tuple(v for v in ray.voxels if v in voxel_field.occupancy)
    return Ray(ray.pixel, ray.voxels, ray.depths, anchors)
