# Keeping points and image in lockstep under augmentation.
#
# Flipping or rescaling the point cloud without touching the image breaks
# the pixel correspondence that fusion relies on. Each operation here
# returns a record; folding that record into the projection matrix makes
# the augmented points land on the augmented image's pixels again.
import numpy as np

from rayfuse import PointCloud, compose_projection
from rayfuse.augment import apply_flip, apply_rescale, apply_rotate
from rayfuse.geometry import GridSpec, ProjectionTransform, make_camera_matrix

rng = np.random.default_rng(0)
grid = GridSpec((4.0, -4.0, -4.0), (0.5, 0.5, 0.5), (16, 16, 16))
camera = make_camera_matrix(80.0, 80.0, 64.0, 48.0, translation=(0.05, -0.1, 0.2))
vt = ProjectionTransform(camera, grid, stride=1, image_dims=(96, 128))

pts = rng.uniform([6.0, -3.0, -2.0], [12.0, 3.0, 2.0], size=(200, 3))
cloud = PointCloud(np.column_stack([pts, rng.uniform(size=200)]))
image = rng.uniform(size=(96, 128))
base_uv, _ = vt.project_world(cloud.xyz)

# --- flip: the image mirrors, and so do the pixels, exactly
flipped, flipped_img, rec = apply_flip(cloud, image)
fvt = compose_projection(grid, camera, rec, stride=1, image_dims=(96, 128))
uv, _ = fvt.project_world(flipped.xyz)
mirror_err = np.abs(np.floor(uv[:, 0]) - (128 - 1 - np.floor(base_uv[:, 0])))
print(f"flip: max pixel mirror error = {mirror_err.max():.0f} (exact)")

# --- rescale: a 2x3 affine fitted on 100 projected points warps the image
scaled, scaled_img, rec = apply_rescale(cloud, image, 1.05, vt, rng)
print(f"rescale 1.05: fitted affine residual = {rec.fit_residual:.4f} px")
svt = compose_projection(grid, camera, rec, stride=1, image_dims=(96, 128))
uv, _ = svt.project_world(scaled.xyz)
drift = np.abs(uv - rec.apply_pixels(base_uv)).max()
print(f"rescale: composed-projection vs affine-of-pixel drift = {drift:.2e} px")

# --- rotate: image untouched, the inverse rotation hides in the matrix
rotated, rec = apply_rotate(cloud, np.pi / 8.0)
rvt = compose_projection(grid, camera, rec, stride=1, image_dims=(96, 128))
uv, _ = rvt.project_world(rotated.xyz)
print(f"rotate pi/8: reprojection residual = {np.abs(uv - base_uv).max():.2e} px")

# involutions: applying an op twice is a no-op on the points
back, _ = apply_rotate(rotated, -np.pi / 8.0)
print(f"rotate round trip error = {np.abs(back.points - cloud.points).max():.2e}")
twice, _, _ = apply_flip(*apply_flip(cloud, image)[:2])
print(f"flip round trip error  = {np.abs(twice.points - cloud.points).max():.2e}")
