"""
Learning which 2D and 3D descriptors belong together
====================================================

Image descriptors (128 values) and point-cloud descriptors (32 values) live
in different spaces, so they cannot be compared by distance. Instead a
random forest is trained on concatenated pairs labelled match or non-match,
and at query time every pair is scored.

Here the descriptors come from synthetic landmarks: each landmark has a
hidden signature, the 2D and 3D descriptors are noisy views of two halves
of it.
"""

import numpy as np

from cloudloc.formats import TrainingSet
from cloudloc.matcher import match_descriptors, train_matcher
from cloudloc.synth import descriptor_2d, descriptor_3d, signature

rng = np.random.default_rng(0)

# 1000 landmarks, their descriptors in both modalities
theta = rng.uniform(0, np.pi / 2, (1000, 16))
sig = signature(theta)
d3 = descriptor_3d(sig, 0.05, rng)

# positives pair a landmark with itself, negatives with a different landmark
a = rng.integers(0, 1000, 3000)
b = (a + rng.integers(1, 1000, 3000)) % 1000
X = np.vstack([np.hstack([descriptor_2d(sig[a], 0.05, rng), d3[a]]),
               np.hstack([descriptor_2d(sig[a], 0.05, rng), d3[b]])])
y = np.r_[np.ones(3000), np.zeros(3000)].astype(np.uint8)

# pick the forest size on a held-out 15 percent, then retrain on everything
model = train_matcher(TrainingSet(X, y), grid=[{"n_trees": 10}, {"n_trees": 25}])
for row in model.meta["grid_report"]:
    print(row["params"], "validation accuracy", round(row["val_accuracy"], 4))

# a query image sees 30 of the landmarks, in shuffled order
seen = rng.choice(1000, 30, replace=False)
query = descriptor_2d(sig[seen], 0.05, rng)
candidates = match_descriptors(model, query, d3, tau=0.5, top_k=1)
correct = sum(seen[c.keypoint2d_id] == c.keypoint3d_id for c in candidates)
print(f"{len(candidates)} candidate matches, {correct} correct")
print("top three:", [(c.keypoint2d_id, c.keypoint3d_id, round(c.probability, 2)) for c in candidates[:3]])
