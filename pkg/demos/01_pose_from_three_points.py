"""
Camera pose from three points, then from noisy matches
======================================================

A calibrated camera sees three known world points. The minimal solver
returns up to four poses that explain them. With many correspondences, half
of them wrong, the robust estimator samples triples, scores each hypothesis
under an inlier/outlier mixture and refines the best one.
"""

import numpy as np

from cloudloc.geometry import CameraIntrinsics, CameraPose, axis_angle, bearings, project_many, rotation_error_deg
from cloudloc.p3p import p3p_solve
from cloudloc.pose import MlesacConfig, mlesac_pose

# a 640x480 camera with a 500 px focal length
K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)

# the ground-truth camera sits at (1, -2, -8), turned 20 degrees about y
truth = CameraPose(axis_angle([0, 1, 0], np.radians(20)), [1.0, -2.0, -8.0])

# three world points and the pixels where the camera sees them
world = np.array([[0.0, 0.0, 2.0], [2.0, 1.0, 1.0], [-1.0, 2.0, 0.5]])
pixels, in_front = project_many(truth, K, world)
print("pixels:\n", pixels.round(2))

# every returned pose reproduces the three rays; one of them is the truth
for i, pose in enumerate(p3p_solve(world, bearings(K, pixels))):
    print(f"solution {i}: centre {pose.center.round(6)}, "
          f"rotation error {rotation_error_deg(truth.rotation, pose.rotation):.2e} deg")

# now 200 points in a box, with the first half of the pixels replaced by junk
rng = np.random.default_rng(0)
world = rng.uniform(-4, 4, (200, 3)) + [0, 0, 6]
pixels, in_front = project_many(truth, K, world)
pixels += rng.normal(0, 0.5, pixels.shape)
pixels[:100] = rng.uniform([0, 0], [640, 480], (100, 2))

result = mlesac_pose(pixels, world, K, MlesacConfig(seed=1))
print(result.status, "with", len(result.inlier_ids), "inliers after", result.stats["iterations"], "samples")
print("position error:", np.linalg.norm(result.pose.center - truth.center).round(4))
print("rotation error (deg):", round(rotation_error_deg(truth.rotation, result.pose.rotation), 4))

# declared inliers are almost all from the clean half
print("clean among inliers:", np.mean(result.inlier_ids >= 100).round(3))
