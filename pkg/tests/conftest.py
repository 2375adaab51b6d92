import numpy as np

from rayfuse.geometry import GridSpec, PointCloud, ProjectionTransform, make_camera_matrix


def world_at_pixel(vt, u_img, v_img, depth):
    """World point at a given continuous image pixel and homogeneous depth."""
    origin, direction = vt.pixel_ray(u_img, v_img)
    return origin + depth * direction


def front_grid(dims=(16, 16, 16), size=0.5, x0=4.0):
    # grid sitting in front of the default camera, symmetric about y=0 and z=0
    y_half = dims[1] * size / 2.0
    z_half = dims[2] * size / 2.0
    return GridSpec((x0, -y_half, -z_half), (size, size, size), dims)


def default_transform(grid=None, stride=1, image_dims=(96, 128), fx=80.0, translation=(0.0, 0.0, 0.0)):
    grid = grid or front_grid()
    h, w = image_dims
    mat = make_camera_matrix(fx, fx, w / 2.0, h / 2.0, translation=translation)
    return ProjectionTransform(mat, grid, stride, image_dims)


def random_cloud_in_view(vt, n, rng, depth_range=(6.0, 14.0), margin=8.0):
    """Points scattered in front of the camera, all projecting inside the image."""
    h, w = vt.image_dims
    us = rng.uniform(margin, w - margin, size=n)
    vs = rng.uniform(margin, h - margin, size=n)
    ds = rng.uniform(*depth_range, size=n)
    pts = np.array([world_at_pixel(vt, u, v, d) for u, v, d in zip(us, vs, ds)])
    return PointCloud(np.column_stack([pts, rng.uniform(size=n)]))


def rotation_zyx(yaw, pitch, roll):
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
    ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def random_valid_transform(grid, seed, stride=4, image_dims=(64, 64)):
    """Generic camera with mild random rotation, looking at the grid down +x."""
    rng = np.random.default_rng(seed)
    h, w = image_dims
    fx = rng.uniform(40.0, 90.0)
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    wobble = rotation_zyx(*rng.uniform(-0.08, 0.08, size=3))
    mat = make_camera_matrix(
        fx,
        fx * rng.uniform(0.9, 1.1),
        w / 2.0 + rng.uniform(-3, 3),
        h / 2.0 + rng.uniform(-3, 3),
        rotation=base @ wobble,
        translation=rng.uniform(-0.3, 0.3, size=3),
    )
    return ProjectionTransform(mat, grid, stride, image_dims)
