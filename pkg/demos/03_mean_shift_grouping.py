"""Mean-shift grouping and the semantic-consistency split.

Shows the flat-kernel mode seeking on planted clusters, then the post-process
that separates semantically mixed instances (the wall-with-a-board case).
"""

import numpy as np

from bevis import Labeling, MeanShiftConfig, SplitConfig, mean_shift, split_inconsistent

rng = np.random.default_rng(1)

# three planted clusters: tight blobs far apart relative to the bandwidth
centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
feats = np.vstack([c + 0.3 * rng.normal(size=(40, 2)) for c in centers])
labels = mean_shift(feats, MeanShiftConfig(bandwidth=1.0, mode_merge_radius=0.5))
print("clusters found:", len(np.unique(labels)))
for cid in np.unique(labels):
    members = np.flatnonzero(labels == cid)
    print(f"  cluster {cid}: {len(members)} points, mean {feats[members].mean(axis=0).round(2)}")

# a single predicted instance that is 100 wall points plus 80 board points:
# both classes clear their thresholds, so the instance splits in two
semantic = np.array([1] * 100 + [6] * 80)
instance = np.zeros(180, dtype=np.int64)
avg_sizes = np.full(8, 1000.0)
avg_sizes[1] = 200.0  # threshold 50 at alpha 0.25
avg_sizes[6] = 160.0  # threshold 40
out = split_inconsistent(Labeling(semantic, instance), SplitConfig(alpha=0.25, avg_instance_size=avg_sizes))
print("instances after split:", len(np.unique(out.instance)))

# a tiny minority stays attached to its majority instance
semantic = np.array([1] * 100 + [6] * 5)
out = split_inconsistent(
    Labeling(semantic, np.zeros(105, dtype=np.int64)),
    SplitConfig(alpha=0.25, avg_instance_size=avg_sizes),
)
print("instances with sub-threshold minority:", len(np.unique(out.instance)))
