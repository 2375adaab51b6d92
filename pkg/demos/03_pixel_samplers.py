# Choosing which pixels deserve a ray.
#
# The feature map is tiled into windows; windows without any projected
# LiDAR point are dropped. Within the kept windows, pixels are drawn by
# one of three heuristics or by a learnable head thresholded at 0.5.
import numpy as np

from rayfuse.autodiff import Tensor
from rayfuse.sampler import (
    gaussian_target_2d,
    head_scores,
    heuristic_sample,
    importance_sample,
    make_sampler_head,
    partition_windows,
)

rng = np.random.default_rng(1)

# two populated windows: a dense blob of 90 projections and a sparse one of 10
dense = [(int(u), int(v)) for u, v in rng.integers([0, 0], [32, 32], size=(90, 2))]
sparse = [(int(u) + 32, int(v)) for u, v in rng.integers([0, 0], [32, 32], size=(10, 2))]
partition = partition_windows((32, 64), dense + sparse, window=32)
print("windows kept:", len(partition.nonempty()), "of", len(partition.windows))

for mode in ("uniformity", "density", "sparsity"):
    picked = heuristic_sample(partition, mode, 1000, np.random.default_rng(2))
    left = sum(1 for p in picked.pixels if p[0] < 32)
    print(f"{mode:11s}: {left:4d} draws in the dense window, {1000 - left:4d} in the sparse one")

# the learnable sampler only ever returns pixels whose response beats 0.5
head = make_sampler_head(channels=8, rng=np.random.default_rng(3))
feats = Tensor(np.random.default_rng(4).normal(size=(8, 32, 64)))
picked = importance_sample(feats, head, partition, n=64, rng=np.random.default_rng(5))
scores = head_scores(feats, head).data
print(f"\nimportance: {len(picked)} pixels, min score {min(picked.scores):.3f} (> 0.5),"
      f" candidate pool {(scores > 0.5).sum()}")

# its supervision: a Gaussian bump per 2D box, 1.0 at each center
target = gaussian_target_2d([(4.0, 4.0, 20.0, 16.0), (30.0, 8.0, 50.0, 24.0)], (32, 64))
print("\ntarget peaks:", target.map.max(), "at", np.unravel_index(target.map.argmax(), target.map.shape))
row = target.map[10, 4:21:4]
print("decay along a row through the first box:", np.array_str(row, precision=3))
