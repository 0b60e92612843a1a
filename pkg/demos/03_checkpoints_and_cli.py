"""
Checkpoints and the command line
================================

Saves a trained ensemble, audits it, and drives the same steps through
the ``subnetens`` command.
"""

import tempfile
from pathlib import Path

from subnetens import TrainConfig, train_orthogonal
from subnetens.checkpoint import ChecksumError, load_checkpoint, save_checkpoint
from subnetens.cli import main
from subnetens.data import DatasetSpec, load_dataset

work = Path(tempfile.mkdtemp(prefix="subnetens-demo-"))
ds = load_dataset(DatasetSpec(n_classes=3, dim=8, cluster_std=1.5, center_distance=4.0, n_samples=600))
config = TrainConfig(k=3, hidden=(32,), pretrain_epochs=2, finetune_epochs=2, prune_epochs=1)
bundle = train_orthogonal(config, ds)

# writes go to a temporary file first, then get renamed into place
path = work / "ensemble.ckpt"
save_checkpoint(bundle, path)
print("checkpoint bytes:", path.stat().st_size)

# loading and saving again reproduces the file exactly
save_checkpoint(load_checkpoint(path), work / "again.ckpt")
print("byte-identical:", path.read_bytes() == (work / "again.ckpt").read_bytes())

# a single flipped byte is caught by the checksum
raw = bytearray(path.read_bytes())
raw[-10] ^= 0x01
(work / "broken.ckpt").write_bytes(bytes(raw))
try:
    load_checkpoint(work / "broken.ckpt")
except ChecksumError as exc:
    print("corruption detected:", exc)

# the CLI does the same work from config files
(work / "train.cfg").write_text("k = 3\nhidden = 32\npretrain_epochs = 2\nfinetune_epochs = 2\nprune_epochs = 1\n")
(work / "data.cfg").write_text("n_classes = 3\ndim = 8\ncluster_std = 1.5\ncenter_distance = 4.0\nn_samples = 600\n")
common = ["--config", str(work / "train.cfg"), "--dataset", str(work / "data.cfg")]

main(["train", "--out", str(work / "cli.ckpt"), *common])
main(["verify", "--checkpoint", str(work / "cli.ckpt")])
main(["eval", "--checkpoint", str(work / "cli.ckpt"), "--dataset", str(work / "data.cfg"), "--out", str(work / "eval.txt")])
main(["sweep", "--k-list", "1,2,4", "--out", str(work / "sweep.csv"), *common])
main(["report", str(work / "sweep.csv")])

# every failure is one stderr line and a distinct exit code
code = main(["verify", "--checkpoint", str(work / "broken.ckpt")])
print("exit code for a corrupt checkpoint:", code)
