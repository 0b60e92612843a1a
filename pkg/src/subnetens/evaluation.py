"""Ensemble prediction and the metrics used to compare ensembles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import forward, softmax
from .trainer import ModelBundle, TrainConfig, sample_dropout_mask, train_orthogonal

NLL_FLOOR = 1e-12


@dataclass
class PredictionMatrix:
    """Class probabilities shaped (members, samples, classes) plus optional labels."""

    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim == 2:
            self.probs = self.probs[None]
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be (members, samples, classes), got {self.probs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.probs.shape[1],):
                raise ValueError("labels must have one entry per sample")

    @property
    def members(self) -> int:
        return self.probs.shape[0]

    def validate(self, atol: float = 1e-6) -> None:
        if (self.probs < 0).any() or not np.allclose(self.probs.sum(-1), 1.0, atol=atol):
            raise ValueError("every probability vector must be nonnegative and sum to 1")

    def _require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("this metric needs labels")
        return self.labels


def aggregate(preds: PredictionMatrix | np.ndarray) -> np.ndarray:
    """Arithmetic mean of member probabilities."""
    probs = preds.probs if isinstance(preds, PredictionMatrix) else np.asarray(preds, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] == 0:
        raise ValueError("need at least one member")
    return probs.mean(axis=0)


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels must have one entry per sample")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    return labels.astype(np.int64)


def accuracy(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs)
    labels = _check_labels(probs, labels)
    return float((probs.argmax(axis=1) == labels).mean())


def nll(probs: np.ndarray, labels) -> float:
    """Mean negative log-probability of the true class, probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(probs, labels)
    p = np.clip(probs[np.arange(len(labels)), labels], NLL_FLOOR, 1.0)
    return float(-np.log(p).mean())


def confidence_bins(confidence: np.ndarray, bins: int) -> np.ndarray:
    """Bin ``b`` covers ``(b/B, (b+1)/B]``; confidence 0 lands in bin 0."""
    edges = np.arange(bins + 1) / bins
    return np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, bins - 1)


def ece(probs: np.ndarray, labels, bins: int = 15) -> float:
    """Expected calibration error with equal-width bins on the max probability."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(probs, labels)
    n = len(labels)
    if n == 0:
        return 0.0
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    b = confidence_bins(conf, bins)
    counts = np.bincount(b, minlength=bins)
    conf_sum = np.bincount(b, weights=conf, minlength=bins)
    hit_sum = np.bincount(b, weights=correct, minlength=bins)
    terms = []
    for i in range(bins):
        if counts[i]:
            nb = int(counts[i])
            terms.append((nb / n) * abs(float(hit_sum[i]) / nb - float(conf_sum[i]) / nb))
    return math.fsum(terms)


def member_correct(preds: PredictionMatrix) -> np.ndarray:
    labels = preds._require_labels()
    return preds.probs.argmax(axis=2) == labels[None, :]


def per_member_accuracy(preds: PredictionMatrix) -> list[float]:
    return [float(c.mean()) for c in member_correct(preds)]


def interrater_agreement(preds: PredictionMatrix) -> float:
    """Kuncheva's interrater agreement over member correctness (lower = more diverse).

    ``1 - (1/L) sum_j l_j (L - l_j) / (N (L-1) p (1-p))`` with ``l_j`` the number
    of members right on sample ``j`` and ``p`` the mean member accuracy. Returns
    1 when ``p`` is 0 or 1.
    """
    if preds.members < 2:
        raise ValueError("interrater agreement needs at least 2 members")
    correct = member_correct(preds)
    L, N = correct.shape
    l = correct.sum(axis=0).astype(np.float64)
    p = l.sum() / (N * L)
    if p <= 0.0 or p >= 1.0:
        return 1.0
    return float(1.0 - (np.sum(l * (L - l)) / L) / (N * (L - 1) * p * (1 - p)))


# -- prediction ---------------------------------------------------------------


def _batched_probs(store, x, mask, variant, scale=1.0, batch=1000) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch):
        logits, _ = forward(store, x[s : s + batch], mask, variant, "eval", weight_scale=scale)
        out.append(softmax(logits.astype(np.float64)))
    return np.concatenate(out)


def subnetwork_predict(bundle: ModelBundle, x, labels=None) -> PredictionMatrix:
    """One row per claimed subnetwork, in claim order."""
    if bundle.masks is None:
        return PredictionMatrix(_batched_probs(bundle.store, x, None, 0), labels)
    rows = []
    for i, m in enumerate(bundle.masks.masks):
        if m is None:
            raise ValueError(f"subnetwork {i} has no mask")
        rows.append(_batched_probs(bundle.store, x, m, i))
    return PredictionMatrix(np.stack(rows), labels)


def ensemble_predict(bundles: Sequence[ModelBundle], x, labels=None) -> PredictionMatrix:
    return PredictionMatrix(np.stack([_batched_probs(b.store, x, None, 0) for b in bundles]), labels)


def mc_dropout_predict(bundle: ModelBundle, x, labels=None, passes: int = 30, seed: int = 0) -> PredictionMatrix:
    """``passes`` forward passes, each with a fresh Bernoulli weight mask."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    rate = bundle.config.dropout_rate
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - rate)
    rows = []
    for _ in range(passes):
        mask = sample_dropout_mask(bundle.store.mask_shapes, rate, rng) if rate > 0 else None
        rows.append(_batched_probs(bundle.store, x, mask, 0, scale))
    return PredictionMatrix(np.stack(rows), labels)


def predict(bundles, x, labels=None, mc_passes: int | None = None, seed: int = 0) -> PredictionMatrix:
    """Member predictions for any bundle kind (a list means a deep ensemble)."""
    if isinstance(bundles, ModelBundle):
        if bundles.method == "mc-dropout":
            passes = mc_passes or bundles.config.mc_forward_passes
            return mc_dropout_predict(bundles, x, labels, passes, seed)
        return subnetwork_predict(bundles, x, labels)
    bundles = list(bundles)
    if len(bundles) == 1:
        return predict(bundles[0], x, labels, mc_passes, seed)
    return ensemble_predict(bundles, x, labels)


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    member_accuracy: list[float]
    nll: float
    ece: float
    ece_bins: int
    ia: float | None
    members: int
    method: str = ""
    config: dict = field(default_factory=dict)

    @property
    def mean_member_accuracy(self) -> float:
        return float(np.mean(self.member_accuracy))

    def to_text(self) -> str:
        lines = [
            f"method = {self.method}",
            f"members = {self.members}",
            f"accuracy = {self.accuracy!r}",
            f"mean_member_accuracy = {self.mean_member_accuracy!r}",
            f"member_accuracy = {','.join(repr(a) for a in self.member_accuracy)}",
            f"nll = {self.nll!r}",
            f"ece = {self.ece!r}",
            f"ece_bins = {self.ece_bins}",
            f"ia = {'' if self.ia is None else repr(self.ia)}",
        ]
        lines += [f"config.{k} = {','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        from .data import parse_kv

        kv = parse_kv(text)
        config = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
        return cls(
            accuracy=float(kv["accuracy"]),
            member_accuracy=[float(a) for a in kv["member_accuracy"].split(",") if a],
            nll=float(kv["nll"]),
            ece=float(kv["ece"]),
            ece_bins=int(kv["ece_bins"]),
            ia=float(kv["ia"]) if kv.get("ia") else None,
            members=int(kv["members"]),
            method=kv.get("method", ""),
            config=config,
        )


def report_from_predictions(preds: PredictionMatrix, bins: int = 15, method: str = "", config=None) -> EvalReport:
    labels = preds._require_labels()
    probs = aggregate(preds)
    return EvalReport(
        accuracy=accuracy(probs, labels),
        member_accuracy=per_member_accuracy(preds),
        nll=nll(probs, labels),
        ece=ece(probs, labels, bins),
        ece_bins=bins,
        ia=interrater_agreement(preds) if preds.members >= 2 else None,
        members=preds.members,
        method=method,
        config=dict(config or {}),
    )


def evaluate(bundles, dataset, mc_passes: int | None = None, seed: int = 0, bins: int = 15) -> EvalReport:
    if not isinstance(bundles, ModelBundle):
        bundles = list(bundles)
        first = bundles[0]
        method = first.method if len(bundles) == 1 else "deep-ensemble"
    else:
        first, method = bundles, bundles.method
    preds = predict(bundles, dataset.x_test, dataset.y_test, mc_passes, seed)
    return report_from_predictions(preds, bins, method, first.config.to_dict())


@dataclass
class SweepRow:
    k: int
    param_count: int | None
    report: EvalReport | None
    error: str = ""


def sweep_k(config: TrainConfig, dataset, k_values: Sequence[int], bins: int = 15) -> list[SweepRow]:
    """Train and evaluate one orthogonal ensemble per ``k``; a failed cell is recorded, not raised."""
    if not k_values:
        raise ValueError("k_values must be nonempty")
    rows = []
    for k in k_values:
        try:
            bundle = train_orthogonal(config.replace(k=int(k)), dataset)
            rows.append(SweepRow(int(k), bundle.store.param_count(), evaluate(bundle, dataset, bins=bins)))
        except Exception as exc:  # noqa: BLE001 - one failed cell must not stop the sweep
            rows.append(SweepRow(int(k), None, None, f"{type(exc).__name__}: {exc}"))
    return rows


SWEEP_COLUMNS = ["k", "param_count", "accuracy", "mean_member_accuracy", "nll", "ece", "ia", "error"]


def sweep_table(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        rep = r.report
        w.writerow(
            [
                r.k,
                "" if r.param_count is None else r.param_count,
                "" if rep is None else repr(rep.accuracy),
                "" if rep is None else repr(rep.mean_member_accuracy),
                "" if rep is None else repr(rep.nll),
                "" if rep is None else repr(rep.ece),
                "" if rep is None or rep.ia is None else repr(rep.ia),
                r.error,
            ]
        )
    return buf.getvalue()


def read_sweep_table(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))

