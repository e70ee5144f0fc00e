"""
Cleaning a point cloud and describing its corners
=================================================

Floating outliers are removed by comparing each point's mean neighbour
distance with the cloud-wide distribution. Surface normals and an intensity
gradient are then estimated per point, corners are picked by a Harris
response on the normals, and each corner gets a rotation-invariant
histogram of nearby gradient directions.
"""

import numpy as np

from cloudloc.features3d import Keypoints3D, default_radii, detect_harris3d, extract_rift
from cloudloc.geometry import random_rotation
from cloudloc.pointcloud import PointCloud, estimate_normals, intensity_and_gradient, sor_filter

rng = np.random.default_rng(3)

# a textured box: random samples on its six faces plus the eight corners
n = 4000
face = rng.integers(0, 6, n)
pts = rng.uniform(-1, 1, (n, 3))
pts[np.arange(n), face // 2] = np.where(face % 2 == 0, -1.0, 1.0)
pts = np.vstack([pts, [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]])
gray = 128 + 100 * np.sin(2.5 * pts[:, 0] + pts[:, 1]) * np.cos(1.7 * pts[:, 2])
colors = np.repeat(gray[:, None], 3, axis=1).clip(0, 255)

# sprinkle 40 floating points through the interior
noise = rng.uniform(-0.7, 0.7, (40, 3))
cloud = PointCloud(np.vstack([pts, noise]), colors=np.vstack([colors, np.full((40, 3), 128.0)]))

clean, removed = sor_filter(cloud, k=16, stddev_mult=3.0)
print(f"removed {len(removed)} points, {np.sum(removed >= len(pts))} of them planted")

# normals (pointing toward the box centre) and intensity gradients
index = clean.index()
clean = intensity_and_gradient(estimate_normals(clean, 16, index=index), 16, index=index)

# radii scale with the median point spacing
r_detect, r_describe = default_radii(index)
kps = detect_harris3d(clean, index, r_detect)
print(f"{len(kps)} keypoints; strongest at", kps.positions[:3].round(2).tolist())

desc = extract_rift(clean, kps, r_describe, index=index)
print("descriptor shape:", desc.values.shape, "valid:", int(desc.valid.sum()))

# rotate the whole cloud and describe the same points again
R = random_rotation(rng)
turned = PointCloud(clean.points @ R.T, colors=clean.colors)
t_index = turned.index()
turned = intensity_and_gradient(estimate_normals(turned, 16, index=t_index), 16, index=t_index)
again = extract_rift(turned, Keypoints3D.from_indices(turned, kps.source_index), r_describe, index=t_index)
print("largest change after rotation:", np.abs(again.values - desc.values).max())
