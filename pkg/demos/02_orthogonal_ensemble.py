"""
An ensemble inside one network
==============================

Trains k subnetworks one after another on disjoint weights, then compares
the ensemble with MC dropout and a single model. Set SUBNETENS_MNIST=1 to
use the bundled MNIST subset with the default epochs (about two minutes)
instead of synthetic blobs.
"""

import os
from pathlib import Path

from subnetens import TrainConfig, evaluate, train_mc_dropout, train_orthogonal
from subnetens.data import DatasetSpec, load_dataset
from subnetens.masks import verify
from subnetens.trainer import train_standard

if os.environ.get("SUBNETENS_MNIST"):
    root = Path(__file__).resolve().parents[1] / "data" / "mnist5k"
    spec = DatasetSpec(
        source="idx_images",
        train_images="train-images-idx3-ubyte.gz",
        train_labels="train-labels-idx1-ubyte.gz",
        test_images="t10k-images-idx3-ubyte.gz",
        test_labels="t10k-labels-idx1-ubyte.gz",
        base_dir=str(root),
        mean=(0.1307,),
        std=(0.3081,),
    )
    config = TrainConfig(k=5)
else:
    spec = DatasetSpec(n_classes=4, dim=16, cluster_std=2.0, center_distance=5.0, n_samples=2000)
    config = TrainConfig(k=5, hidden=(64, 64), pretrain_epochs=5, finetune_epochs=5, prune_epochs=3, epochs=10)
ds = load_dataset(spec)

# pretrain on the free weights, choose a mask by edge-pop, claim it, finetune it; repeat k times
bundle = train_orthogonal(config, ds)
print(verify(bundle.masks).lines()[0])
ortho = evaluate(bundle, ds)

# every subnetwork is a full classifier on its own
for i, acc in enumerate(ortho.member_accuracy):
    print(f"subnetwork {i}: accuracy {acc:.4f}")

# baselines: weight-level MC dropout averaged over 30 passes, and one plain network
mc = evaluate(train_mc_dropout(config.replace(fixed_classifier=False), ds), ds)
single = evaluate(train_standard(config.replace(fixed_classifier=False), ds), ds)

print()
print(f"{'':12s} {'accuracy':>9s} {'nll':>7s} {'ece':>7s} {'ia':>7s}")
for name, r in (("orthogonal", ortho), ("mc dropout", mc), ("single", single)):
    ia = "" if r.ia is None else f"{r.ia:.4f}"
    print(f"{name:12s} {r.accuracy:9.4f} {r.nll:7.4f} {r.ece:7.4f} {ia:>7s}")

# all k subnetworks together cost one network's worth of weights
print("\nparameters:", bundle.store.param_count())
