import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetens.evaluation import (
    EvalReport,
    PredictionMatrix,
    aggregate,
    ece,
    evaluate,
    interrater_agreement,
    mc_dropout_predict,
    nll,
    per_member_accuracy,
    predict,
    read_sweep_table,
    report_from_predictions,
    sweep_k,
    sweep_table,
)
from subnetens.trainer import TrainConfig, train_mc_dropout, train_orthogonal, train_standard

TINY = dict(hidden=(16,), pretrain_epochs=2, finetune_epochs=2, prune_epochs=1, epochs=2, batch_size=64)


def ece_oracle(probs, labels, bins=15):
    """Per-sample loop; bin b holds confidences in (b/B, (b+1)/B], zero goes to bin 0."""
    n = len(labels)
    count = [0] * bins
    conf_sum = [0.0] * bins
    hit_sum = [0.0] * bins
    for p, y in zip(probs, labels):
        c = float(max(p))
        b = 0
        while b < bins - 1 and c > (b + 1) / bins:
            b += 1
        count[b] += 1
        conf_sum[b] += c
        hit_sum[b] += 1.0 if int(np.argmax(p)) == y else 0.0
    return math.fsum((count[b] / n) * abs(hit_sum[b] / count[b] - conf_sum[b] / count[b]) for b in range(bins) if count[b])


def kappa_oracle(correct):
    correct = np.asarray(correct, bool)
    L, N = correct.shape
    l = correct.sum(0)
    p = l.sum() / (N * L)
    return 1 - sum(lj * (L - lj) for lj in l) / L / (N * (L - 1) * p * (1 - p))


def random_probs(rng, shape):
    logits = rng.standard_normal(shape) * 2
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class TestAggregate:
    def test_symmetric_pair(self):
        np.testing.assert_array_equal(aggregate(np.array([[[1.0, 0.0]], [[0.0, 1.0]]])), [[0.5, 0.5]])

    def test_single_member_identity(self, rng):
        p = random_probs(rng, (1, 4, 3))
        np.testing.assert_array_equal(aggregate(p), p[0])

    def test_three_members(self):
        p = np.array([[[0.6, 0.4]], [[0.2, 0.8]], [[0.7, 0.3]]])
        np.testing.assert_allclose(aggregate(p), [[0.5, 0.5]], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        agg = aggregate(random_probs(rng, (7, 200, 10)))
        assert np.abs(agg.sum(1) - 1).max() <= 1e-6

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate(np.zeros((0, 3, 2)))


class TestNll:
    def test_certain(self):
        assert nll(np.eye(3), [0, 1, 2]) <= 1e-11

    def test_inverse_e(self):
        p = math.exp(-1)
        assert abs(nll(np.array([[p, 1 - p]]), [0]) - 1.0) <= 1e-12

    def test_two_samples(self):
        v = nll(np.array([[0.5, 0.5], [0.75, 0.25]]), [0, 1])
        assert v == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)

    def test_floor(self):
        assert nll(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_bad_label(self):
        with pytest.raises(ValueError):
            nll(np.array([[1.0, 0.0]]), [2])


class TestEce:
    def test_perfect(self):
        assert ece(np.eye(4), [0, 1, 2, 3]) == 0.0

    def test_calibrated_bin(self):
        probs = np.tile([0.9, 0.1], (10, 1))
        labels = [0] * 9 + [1]
        assert ece(probs, labels) == pytest.approx(0.0, abs=1e-15)

    def test_half_wrong(self):
        assert ece(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 1]) == 0.5

    def test_matches_oracle(self, rng):
        for trial in range(50):
            n = int(rng.integers(1, 1001))
            c = int(rng.integers(2, 11))
            probs = random_probs(rng, (n, c))
            if trial % 5 == 0:
                # confidences sitting exactly on bin edges
                edges = rng.integers(1, 16, n) / 15
                probs = np.stack([edges, 1 - edges], 1)
            labels = rng.integers(0, probs.shape[1], n)
            assert ece(probs, labels) == ece_oracle(probs, labels)

    def test_range(self, rng):
        probs = random_probs(rng, (300, 5))
        assert 0.0 <= ece(probs, rng.integers(0, 5, 300)) <= 1.0


class TestAgreement:
    def test_all_correct(self):
        p = np.tile(np.eye(2)[None], (3, 1, 1))
        assert interrater_agreement(PredictionMatrix(p, [0, 1])) == 1.0

    def test_hand_case(self):
        # member 0 right on both samples, member 1 right on the first only
        p = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]])
        assert abs(interrater_agreement(PredictionMatrix(p, [0, 1])) - (-1 / 3)) <= 1e-12

    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            interrater_agreement(PredictionMatrix(np.eye(2)[None], [0, 1]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 40), st.integers(0, 2**32 - 1))
    def test_matches_oracle_and_permutation_invariant(self, L, N, seed):
        rng = np.random.default_rng(seed)
        probs = random_probs(rng, (L, N, 3))
        labels = rng.integers(0, 3, N)
        pm = PredictionMatrix(probs, labels)
        correct = probs.argmax(2) == labels
        k = interrater_agreement(pm)
        if 0 < correct.mean() < 1:
            assert k == pytest.approx(kappa_oracle(correct), abs=1e-12)
        perm = PredictionMatrix(probs[rng.permutation(L)], labels)
        assert interrater_agreement(perm) == pytest.approx(k, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 40), st.integers(0, 2**32 - 1))
    def test_duplicating_members(self, L, N, seed):
        rng = np.random.default_rng(seed)
        probs = random_probs(rng, (L, N, 3))
        labels = rng.integers(0, 3, N)
        k = interrater_agreement(PredictionMatrix(probs, labels))
        k2 = interrater_agreement(PredictionMatrix(np.concatenate([probs, probs]), labels))
        # l_j and L both double; p is unchanged, so only the (L - 1) normaliser moves
        assert k2 == pytest.approx(1 - (1 - k) * 2 * (L - 1) / (2 * L - 1), abs=1e-12)


class TestMemberAccuracy:
    def test_perfect_and_constant(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        p = np.stack([np.eye(3)[labels], np.tile(np.eye(3)[0], (6, 1))])
        assert per_member_accuracy(PredictionMatrix(p, labels)) == [1.0, pytest.approx(1 / 3)]

    def test_counting(self, rng):
        probs = random_probs(rng, (3, 50, 4))
        labels = rng.integers(0, 4, 50)
        want = [sum(int(np.argmax(probs[m, j]) == labels[j]) for j in range(50)) / 50 for m in range(3)]
        assert per_member_accuracy(PredictionMatrix(probs, labels)) == want

    def test_prediction_matrix_validation(self):
        with pytest.raises(ValueError):
            PredictionMatrix(np.array([[[0.7, 0.7]]])).validate()


class TestReports:
    def test_invariants_and_text_round_trip(self, rng):
        probs = random_probs(rng, (4, 100, 3))
        rep = report_from_predictions(PredictionMatrix(probs, rng.integers(0, 3, 100)), method="x", config={"k": 4})
        assert 0 <= rep.accuracy <= 1 and 0 <= rep.ece <= 1 and len(rep.member_accuracy) == rep.members == 4
        back = EvalReport.from_text(rep.to_text())
        assert back.accuracy == rep.accuracy and back.ia == rep.ia and back.member_accuracy == rep.member_accuracy
        assert back.config == {"k": "4"}


class TestPrediction:
    def test_orthogonal_has_one_row_per_subnetwork(self, blobs):
        b = train_orthogonal(TrainConfig(k=3, **TINY), blobs)
        pm = predict(b, blobs.x_test, blobs.y_test)
        assert pm.members == 3
        pm.validate()
        assert len(evaluate(b, blobs).member_accuracy) == 3

    def test_mc_passes_one_rate_zero_is_deterministic(self, blobs):
        b = train_mc_dropout(TrainConfig(dropout_rate=0.0, **TINY), blobs)
        det = predict(train_standard(TrainConfig(**TINY), blobs), blobs.x_test)
        mc = mc_dropout_predict(b, blobs.x_test, passes=1)
        np.testing.assert_array_equal(mc.probs, det.probs)

    def test_mc_same_seed_same_matrix(self, blobs):
        b = train_mc_dropout(TrainConfig(**TINY), blobs)
        a = mc_dropout_predict(b, blobs.x_test, passes=5, seed=3)
        c = mc_dropout_predict(b, blobs.x_test, passes=5, seed=3)
        assert a.members == 5 and np.array_equal(a.probs, c.probs)

    def test_mc_averaging_lowers_nll_against_one_pass(self, blobs):
        b = train_mc_dropout(TrainConfig(dropout_rate=0.3, **TINY), blobs)
        many = mc_dropout_predict(b, blobs.x_test, blobs.y_test, passes=30, seed=1)
        single = [nll(many.probs[j], blobs.y_test) for j in range(30)]
        # the mean of log-losses bounds the log-loss of the mean (Jensen)
        assert nll(aggregate(many), blobs.y_test) <= np.mean(single) + 1e-12


class TestSweep:
    def test_single_k_matches_single_model_report(self, blobs):
        cfg = TrainConfig(mask_optimization=False, **TINY)
        rows = sweep_k(cfg, blobs, [1])
        direct = evaluate(train_orthogonal(cfg.replace(k=1), blobs), blobs)
        assert len(rows) == 1 and rows[0].report.accuracy == direct.accuracy
        assert rows[0].report.members == 1 and rows[0].report.ia is None

    def test_rows_and_table(self, blobs):
        rows = sweep_k(TrainConfig(**TINY), blobs, [2, 5, 10])
        assert [r.report.members for r in rows] == [2, 5, 10]
        assert len({r.param_count for r in rows}) == 1
        table = read_sweep_table(sweep_table(rows))
        assert [t["k"] for t in table] == ["2", "5", "10"]

    def test_failed_cell_is_recorded(self, blobs):
        rows = sweep_k(TrainConfig(**TINY), blobs, [2, 0])
        assert rows[0].error == "" and rows[1].report is None and "k must be" in rows[1].error
