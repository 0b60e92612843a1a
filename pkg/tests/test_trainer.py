import json
import logging

import numpy as np
import pytest

from subnetens.data import Dataset, DatasetSpec, synth_blobs
from subnetens.evaluation import evaluate
from subnetens.masks import verify
from subnetens.nn import init_network
from subnetens.trainer import (
    EnsembleTrainingError,
    TrainConfig,
    TrainingDivergedError,
    train_deep_ensemble,
    train_mc_dropout,
    train_orthogonal,
    train_standard,
)

TINY = dict(hidden=(16, 16), pretrain_epochs=2, finetune_epochs=2, prune_epochs=1, epochs=3, batch_size=64)


def snapshot(store):
    return {n: store.params[n].copy() for n in store.maskable}


class TestOrthogonal:
    def test_structure(self, blobs):
        b = train_orthogonal(TrainConfig(k=5, **TINY), blobs)
        rep = verify(b.masks)
        assert rep.ok and rep.coverage == 1.0
        assert len(evaluate(b, blobs).member_accuracy) == 5

    def test_claimed_weights_frozen_and_ownership(self, blobs):
        snaps, masks = [], []

        def hook(i, store, maskset):
            snaps.append(snapshot(store))
            masks.append(maskset.masks[i])

        b = train_orthogonal(TrainConfig(k=4, **TINY), blobs, on_iteration=hook)
        final = snapshot(b.store)
        for i, m in enumerate(masks):
            for name, layer in zip(b.store.maskable, m.layers):
                assert snaps[i][name][layer].tobytes() == final[name][layer].tobytes()
        # between consecutive iterations, only weights outside earlier masks may move
        for i in range(1, len(snaps)):
            claimed = masks[0]
            for m in masks[1:i]:
                claimed = claimed | m
            for name, layer in zip(b.store.maskable, claimed.layers):
                assert np.array_equal(snaps[i][name][layer], snaps[i - 1][name][layer])

    def test_fixed_classifier_stays_at_init(self, blobs):
        cfg = TrainConfig(k=3, **TINY)
        b = train_orthogonal(cfg, blobs)
        ref = init_network(b.store.arch, cfg.seed, variants=3, frozen_classifier=True)
        for n in b.store.classifier_names:
            assert b.store.params[n].tobytes() == ref.params[n].tobytes()

    def test_without_fixed_classifier_each_subnetwork_has_a_head(self, blobs):
        b = train_orthogonal(TrainConfig(k=3, fixed_classifier=False, **TINY), blobs)
        assert b.store.heads == 3 and not b.store.classifier_frozen

    @pytest.mark.parametrize("mo,fc", [(False, False), (True, False), (True, True)])
    def test_ablation_lattice(self, blobs, mo, fc):
        b = train_orthogonal(TrainConfig(k=3, mask_optimization=mo, fixed_classifier=fc, **TINY), blobs)
        assert verify(b.masks).ok and b.store.classifier_frozen == fc

    def test_random_masks_without_optimisation(self, blobs):
        a = train_orthogonal(TrainConfig(k=3, mask_optimization=False, **TINY), blobs)
        b = train_orthogonal(TrainConfig(k=3, mask_optimization=False, **TINY), blobs)
        assert a.masks.masks == b.masks.masks

    def test_deterministic(self, blobs):
        a = train_orthogonal(TrainConfig(k=2, **TINY), blobs)
        b = train_orthogonal(TrainConfig(k=2, **TINY), blobs)
        assert a.equals(b)

    def test_single_subnetwork_reduces_to_plain_training(self, blobs):
        cfg = TrainConfig(k=1, mask_optimization=False, fixed_classifier=False, **{**TINY, "finetune_epochs": 0})
        b = train_orthogonal(cfg.replace(pretrain_epochs=10), blobs)
        assert b.masks.masks[0].fraction() == 1.0
        plain = train_standard(cfg.replace(epochs=10), blobs)
        assert abs(evaluate(b, blobs).accuracy - evaluate(plain, blobs).accuracy) <= 0.05

    def test_logs(self, blobs, caplog):
        with caplog.at_level(logging.INFO, logger="subnetens.train"):
            b = train_orthogonal(TrainConfig(k=2, **TINY), blobs)
        assert len(b.logs) == 2 * (2 + 2)
        rec = json.loads(caplog.records[0].getMessage())
        assert {"epoch", "split", "loss", "accuracy", "iteration", "phase"} <= set(rec)
        assert rec == b.logs[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_the_iteration(self, blobs):
        with pytest.raises(TrainingDivergedError) as info:
            train_orthogonal(TrainConfig(k=2, lr=1e30, weight_decay=0, **TINY), blobs)
        assert info.value.iteration == 0


class TestBaselines:
    def test_mc_rate_zero_is_deterministic_training(self, blobs):
        mc = train_mc_dropout(TrainConfig(dropout_rate=0.0, **TINY), blobs)
        det = train_standard(TrainConfig(**TINY), blobs)
        assert mc.store.equals(det.store)

    def test_mc_deterministic(self, blobs):
        a = train_mc_dropout(TrainConfig(**TINY), blobs)
        b = train_mc_dropout(TrainConfig(**TINY), blobs)
        assert a.store.equals(b.store)

    def test_deep_ensemble_of_one(self, blobs):
        cfg = TrainConfig(ensemble_size=1, fixed_classifier=False, **TINY)
        (only,) = train_deep_ensemble(cfg, blobs)
        assert only.store.equals(train_standard(cfg, blobs).store)

    def test_deep_ensemble_members_differ_and_share_classifier(self, blobs):
        members = train_deep_ensemble(TrainConfig(ensemble_size=3, **TINY), blobs)
        assert [m.config.seed for m in members] == [0, 1, 2]
        assert not members[0].store.equals(members[1].store)
        w = members[0].store.classifier_names[0]
        assert all(np.array_equal(m.store.params[w], members[0].store.params[w]) for m in members)

    def test_threads_do_not_change_results(self, blobs, monkeypatch):
        cfg = TrainConfig(ensemble_size=3, **TINY)
        serial = train_deep_ensemble(cfg, blobs)
        monkeypatch.setenv("SUBNETENS_THREADS", "3")
        threaded = train_deep_ensemble(cfg, blobs)
        assert all(a.equals(b) for a, b in zip(serial, threaded))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_deep_ensemble_failure_reported(self, blobs):
        with pytest.raises(EnsembleTrainingError):
            train_deep_ensemble(TrainConfig(ensemble_size=2, lr=1e30, weight_decay=0, **TINY), blobs)


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"k": 0}, {"epochs": -1}, {"dropout_rate": 1.0}, {"dropout_rate": -0.1}, {"arch": "rnn"}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_dict_round_trip(self):
        cfg = TrainConfig(k=3, hidden=(8, 4))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_cnn_arch(self):
        flat = synth_blobs(DatasetSpec(n_classes=2, dim=64, n_samples=64, seed=1))
        ds = Dataset(flat.x_train, flat.y_train, flat.x_test, flat.y_test, 2, (1, 8, 8))
        b = train_orthogonal(TrainConfig(k=2, arch="cnn", channels=(4,), **TINY), ds)
        assert verify(b.masks).ok and len(b.store.mask_shapes[0]) == 4
