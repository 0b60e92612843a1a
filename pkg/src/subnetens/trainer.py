"""Training procedures: sequential orthogonal subnetworks and the two baselines.

``train_orthogonal`` carves ``k`` disjoint subnetworks out of one store, one
after another. Iteration ``i`` redraws the still-unclaimed weights, pretrains
them, picks subnetwork ``i``'s mask among them (edge-pop or a slice of a random
partition), claims it and finetunes only the claimed weights. Weights claimed
earlier are excluded from the forward pass and from every update.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import masks as mk
from .edgepop import PruneConfig, optimize_mask
from .nn import (
    Architecture,
    NonFiniteError,
    SgdState,
    WeightStore,
    backward,
    forward,
    he_normal,
    init_network,
    mlp,
    small_cnn,
    store_sgd_step,
)

log = logging.getLogger("subnetens.train")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, phase: str, detail: str = ""):
        self.iteration = iteration
        self.phase = phase
        super().__init__(f"training diverged in iteration {iteration} ({phase}){': ' + detail if detail else ''}")


class EnsembleTrainingError(RuntimeError):
    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        super().__init__("; ".join(f"member {j}: {msg}" for j, msg in sorted(failures.items())))


@dataclass
class TrainConfig:
    k: int = 5
    arch: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (256, 256)
    channels: tuple[int, ...] = (16, 32)
    batchnorm: bool = True
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    prune_epochs: int = 20
    epochs: int = 30  # baselines: MC dropout and deep-ensemble members
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of each phase
    lr_decay: float = 0.1
    score_lr: float = 0.01
    score_momentum: float = 0.9
    fixed_classifier: bool = True
    mask_optimization: bool = True
    reinit_available: bool = True
    dropout_rate: float = 0.15
    mc_forward_passes: int = 30
    ensemble_size: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name in ("pretrain_epochs", "finetune_epochs", "prune_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.mc_forward_passes < 1 or self.ensemble_size < 1 or self.batch_size < 1:
            raise ValueError("mc_forward_passes, ensemble_size and batch_size must be >= 1")
        if self.arch not in ("mlp", "cnn"):
            raise ValueError(f"unknown arch {self.arch!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


@dataclass
class ModelBundle:
    method: str  # orthogonal | mc-dropout | standard
    config: TrainConfig
    store: WeightStore
    masks: mk.MaskSet | None = None
    logs: list[dict] = field(default_factory=list)

    @property
    def members(self) -> int:
        return self.store.variants if self.method == "orthogonal" else 1

    def equals(self, other: "ModelBundle") -> bool:
        if self.method != other.method or self.config != other.config or self.logs != other.logs:
            return False
        if not self.store.equals(other.store):
            return False
        if (self.masks is None) != (other.masks is None):
            return False
        if self.masks is not None:
            a, b = self.masks, other.masks
            return a.k == b.k and a.shapes == b.shapes and a.masks == b.masks and a.claimed == b.claimed
        return True


def build_arch(config: TrainConfig, input_shape, n_classes: int) -> Architecture:
    if config.arch == "mlp":
        return mlp(int(np.prod(input_shape)), config.hidden, n_classes, config.batchnorm)
    shape = tuple(input_shape)
    if len(shape) == 1:
        side = int(round(np.sqrt(shape[0])))
        if side * side != shape[0]:
            raise ValueError(f"cannot infer an image shape from {shape}")
        shape = (1, side, side)
    return small_cnn(shape, config.channels, n_classes)


def _milestones(config: TrainConfig, epochs: int) -> tuple[int, ...]:
    return tuple(int(round(f * epochs)) for f in config.lr_milestones)


def sample_dropout_mask(shapes, rate: float, rng: np.random.Generator) -> mk.Mask:
    """Bernoulli keep-mask: each weight is dropped independently with probability ``rate``."""
    return mk.Mask([rng.random(s) >= rate for s in shapes])


def _emit(logs: list, record: dict) -> None:
    logs.append(record)
    log.info(json.dumps(record, sort_keys=True))


def train_phase(
    store: WeightStore,
    data,
    config: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    *,
    variant: int = 0,
    mask: mk.Mask | None = None,
    update: mk.Mask | None = None,
    dropout_rate: float = 0.0,
    logs: list | None = None,
    tag: dict | None = None,
) -> None:
    """Minibatch SGD on subnetwork ``variant``; only weights inside ``update`` may change."""
    x, y = data
    state = SgdState(
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        milestones=_milestones(config, epochs),
        decay=config.lr_decay,
    )
    update_masks = None if update is None else dict(zip(store.maskable, update.layers))
    scale = 1.0 / (1.0 - dropout_rate) if dropout_rate > 0 else 1.0
    tag = tag or {}
    for epoch in range(epochs):
        state.epoch = epoch
        order = rng.permutation(len(x))
        total, correct, seen = 0.0, 0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            m = mask
            if dropout_rate > 0:
                drop = sample_dropout_mask(store.mask_shapes, dropout_rate, rng)
                m = drop if mask is None else drop & mask
            try:
                logits, cache = forward(store, x[idx], m, variant, "train", weight_scale=scale)
                rec = backward(cache, y[idx])
            except NonFiniteError as exc:
                raise TrainingDivergedError(tag.get("iteration", 0), tag.get("phase", "train"), str(exc)) from exc
            if not np.isfinite(rec.loss):
                raise TrainingDivergedError(tag.get("iteration", 0), tag.get("phase", "train"), "non-finite loss")
            store_sgd_step(store, rec, state, variant, update_masks)
            total += rec.loss * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
            seen += len(idx)
        if logs is not None:
            _emit(
                logs,
                {
                    **tag,
                    "epoch": epoch,
                    "split": "train",
                    "loss": total / seen,
                    "accuracy": correct / seen,
                    "lr": state.current_lr(),
                },
            )


def _reinit_available(store: WeightStore, avail: mk.Mask, variant: int, rng: np.random.Generator) -> None:
    """Redraw unclaimed weights and reset subnetwork ``variant``'s private tensors."""
    for name, a in zip(store.maskable, avail.layers):
        w = store.params[name]
        np.copyto(w, he_normal(rng, w.shape, store.dtype), where=a)
    for name in store.per_variant:
        p = store.params[name][variant]
        p[...] = 1.0 if name.endswith(".gamma") else 0.0
    for name in store.buffers:
        store.buffers[name][variant] = 1.0 if name.endswith("running_var") else 0.0
    if store.heads > 1:
        wname, bname = store.classifier_names
        store.params[wname][variant] = he_normal(rng, store.params[wname].shape[1:], store.dtype)
        store.params[bname][variant] = 0.0
    store.version += 1


def train_orthogonal(config: TrainConfig, dataset, *, on_iteration=None) -> ModelBundle:
    """Sequential pretrain -> mask selection -> finetune for ``config.k`` subnetworks.

    ``on_iteration(i, store, maskset)`` is called after subnetwork ``i`` is finetuned.
    """
    config.validate()
    k = config.k
    arch = build_arch(config, dataset.input_shape, dataset.n_classes)
    heads = 1 if config.fixed_classifier else k
    store = init_network(arch, config.seed, variants=k, heads=heads, frozen_classifier=config.fixed_classifier)
    maskset = mk.MaskSet.empty(store.mask_shapes, k)
    partition = None
    if not config.mask_optimization:
        partition = mk.random_orthogonal_partition(store.mask_shapes, k, seed=config.seed + 7919)
    logs: list[dict] = []
    data = (dataset.x_train, dataset.y_train)
    for i in range(k):
        avail = mk.availability(maskset, i)
        rng = np.random.default_rng([config.seed, i])
        if config.reinit_available:
            _reinit_available(store, avail, i, rng)
        base = {"method": "orthogonal", "iteration": i}
        train_phase(
            store, data, config, config.pretrain_epochs, rng, variant=i, mask=avail, update=avail,
            logs=logs, tag={**base, "phase": "pretrain"},
        )
        if config.mask_optimization:
            prune_cfg = PruneConfig(
                quotas=maskset.quotas(i),
                epochs=config.prune_epochs,
                lr=config.score_lr,
                momentum=config.score_momentum,
                batch_size=config.batch_size,
                seed=int(rng.integers(2**31)),
            )
            try:
                mask = optimize_mask(store, avail, prune_cfg, data, variant=i)
            except NonFiniteError as exc:
                raise TrainingDivergedError(i, "prune", str(exc)) from exc
        else:
            mask = partition.masks[i]
        maskset = mk.claim(maskset, i, mask)
        train_phase(
            store, data, config, config.finetune_epochs, rng, variant=i, mask=mask, update=mask,
            logs=logs, tag={**base, "phase": "finetune"},
        )
        if on_iteration is not None:
            on_iteration(i, store, maskset)
    return ModelBundle("orthogonal", config, store, maskset, logs)


def train_standard(config: TrainConfig, dataset, seed: int | None = None, classifier=None) -> ModelBundle:
    """One ordinary network trained for ``config.epochs`` (a deep-ensemble member).

    ``classifier`` optionally supplies ``(weight, bias)`` to copy into a frozen classifier.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    arch = build_arch(config, dataset.input_shape, dataset.n_classes)
    store = init_network(arch, seed, frozen_classifier=config.fixed_classifier)
    if classifier is not None:
        wname, bname = store.classifier_names
        store.params[wname][...] = classifier[0]
        store.params[bname][...] = classifier[1]
    logs: list[dict] = []
    rng = np.random.default_rng([seed, 0])
    train_phase(
        store, (dataset.x_train, dataset.y_train), config, config.epochs, rng,
        logs=logs, tag={"method": "standard", "iteration": 0, "phase": "train", "seed": seed},
    )
    return ModelBundle("standard", config.replace(seed=seed), store, None, logs)


def train_mc_dropout(config: TrainConfig, dataset) -> ModelBundle:
    """Training with a fresh Bernoulli weight mask per minibatch and 1/(1-p) scaling."""
    config.validate()
    arch = build_arch(config, dataset.input_shape, dataset.n_classes)
    store = init_network(arch, config.seed, frozen_classifier=config.fixed_classifier)
    logs: list[dict] = []
    rng = np.random.default_rng([config.seed, 0])
    train_phase(
        store, (dataset.x_train, dataset.y_train), config, config.epochs, rng,
        dropout_rate=config.dropout_rate, logs=logs,
        tag={"method": "mc-dropout", "iteration": 0, "phase": "train"},
    )
    return ModelBundle("mc-dropout", config, store, None, logs)


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("SUBNETENS_THREADS", "1")))
    except ValueError:
        return 1


def train_deep_ensemble(config: TrainConfig, dataset) -> list[ModelBundle]:
    """``config.ensemble_size`` independent members with seeds ``seed, seed+1, ...``.

    With ``fixed_classifier`` every member gets the same frozen classifier,
    drawn from ``config.seed``.
    """
    config.validate()
    shared = None
    if config.fixed_classifier:
        arch = build_arch(config, dataset.input_shape, dataset.n_classes)
        ref = init_network(arch, config.seed, frozen_classifier=True)
        wname, bname = ref.classifier_names
        shared = (ref.params[wname].copy(), ref.params[bname].copy())
    seeds = [config.seed + j for j in range(config.ensemble_size)]
    results: dict[int, ModelBundle] = {}
    failures: dict[int, str] = {}

    def run(j: int):
        try:
            results[j] = train_standard(config, dataset, seeds[j], shared)
        except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
            failures[j] = str(exc)

    workers = min(_thread_cap(), len(seeds))
    if workers == 1:
        for j in range(len(seeds)):
            run(j)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, range(len(seeds))))
    if failures:
        raise EnsembleTrainingError(failures)
    return [results[j] for j in range(len(seeds))]
