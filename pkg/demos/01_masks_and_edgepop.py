"""
Disjoint masks and edge-pop selection
=====================================

Splits a small network's weights into non-overlapping masks, then lets
edge-pop pick one subnetwork out of the weights that are still free.
"""

import numpy as np

from subnetens import masks as mk
from subnetens.data import DatasetSpec, load_dataset
from subnetens.edgepop import PruneConfig, init_scores, optimize_mask, select_mask
from subnetens.nn import forward, init_network, mlp
from subnetens.trainer import TrainConfig, train_phase

# a random partition of three layers into k=5 disjoint masks
ms = mk.random_orthogonal_partition([(8, 6), (4, 8), 7], k=5, seed=0)
for line in mk.verify(ms).lines():
    print(line)

# the 7-weight layer cannot split evenly: the first two masks get the extra weight
print("per-mask counts in the last layer:", [m.popcounts[2] for m in ms.masks])

# subnetwork i may only use what masks 0..i-1 left behind
for i in range(5):
    print(f"subnetwork {i} sees {mk.availability(ms, i).fraction():.0%} of the weights")

# now pick a mask by score instead of at random, starting from a briefly trained network
ds = load_dataset(DatasetSpec(n_classes=3, dim=10, cluster_std=1.5, center_distance=4.0, n_samples=600))
store = init_network(mlp(10, (32,), 3), seed=0)
train_phase(store, ds.train, TrainConfig(batch_size=64), 10, np.random.default_rng(0))
k = 4
quotas = [mk.layer_quota(int(np.prod(s)), k, 0) for s in store.mask_shapes]
avail = mk.Mask.ones(store.mask_shapes)


def held_out_accuracy(mask):
    logits, _ = forward(store, ds.x_test, mask, 0, "train", update_stats=False)
    return (logits.argmax(1) == ds.y_test).mean()


# scores start at W / max|W|, so zero epochs is plain magnitude pruning
magnitude = select_mask(init_scores(store), avail, quotas)
learned = optimize_mask(store, avail, PruneConfig(quotas, epochs=20), ds.train)
random = mk.random_orthogonal_partition(store.mask_shapes, k, seed=1).masks[0]

print(f"all weights     test accuracy {held_out_accuracy(None):.3f}")
print(f"random mask     test accuracy {held_out_accuracy(random):.3f}")
print(f"magnitude mask  test accuracy {held_out_accuracy(magnitude):.3f}")
print(f"edge-pop mask   test accuracy {held_out_accuracy(learned):.3f}")

# the weights themselves never moved; only the choice of which ones to keep did
ms = mk.claim(mk.MaskSet.empty(store.mask_shapes, k), 0, learned)
print("claimed fraction after one subnetwork:", ms.claimed.fraction())
