"""Small feed-forward network engine with maskable weights.

Supports dense, 2-D convolution, batchnorm, ReLU and flatten layers followed by
a single classifier layer. Backpropagation is written out by hand. Every dense
layer carries one bias vector per subnetwork ("variant") and every batchnorm
layer one set of affine parameters and running statistics per variant, so a
single store can host several subnetworks that share weight tensors.

Parameters live in ``WeightStore.params`` keyed ``"<layer>.<name>"``.  Tensors
that exist once per variant carry a leading variant axis.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv", "batchnorm", "relu", "flatten", "classifier")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    """Raised when activations or losses stop being finite."""


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is used after the store was updated."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # output features (dense/classifier) or channels (conv)
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    maskable: bool | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "units": self.units,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "maskable": self.maskable,
        }


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].units

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**layer) for layer in d["layers"]))


def mlp(in_features: int, hidden=(256, 256), n_classes: int = 10, batchnorm: bool = True) -> Architecture:
    layers = []
    for h in hidden:
        layers.append(LayerSpec("dense", h))
        if batchnorm:
            layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("classifier", n_classes))
    return Architecture((in_features,), tuple(layers))


def small_cnn(input_shape=(1, 28, 28), channels=(16, 32), n_classes: int = 10) -> Architecture:
    """Stride-2 3x3 conv blocks (conv -> batchnorm -> relu), then the classifier."""
    layers = []
    for c in channels:
        layers += [LayerSpec("conv", c, kernel=3, stride=2, padding=1), LayerSpec("batchnorm"), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("classifier", n_classes)]
    return Architecture(tuple(input_shape), tuple(layers))


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def layer_shapes(arch: Architecture) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(input shape, output shape) per layer, batch axis excluded."""
    if not arch.layers or arch.layers[-1].kind != "classifier":
        raise ValueError("architecture must end with a classifier layer")
    shapes = []
    cur = tuple(arch.input_shape)
    for idx, layer in enumerate(arch.layers):
        if layer.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if layer.kind == "classifier" and idx != len(arch.layers) - 1:
            raise ValueError("classifier must be the last layer")
        if layer.kind in ("dense", "classifier"):
            if len(cur) != 1:
                raise ValueError(f"layer {idx}: {layer.kind} expects flat input, got {cur}")
            out = (layer.units,)
        elif layer.kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"layer {idx}: conv expects (C, H, W) input, got {cur}")
            c, h, w = cur
            out = (
                layer.units,
                _conv_out(h, layer.kernel, layer.stride, layer.padding),
                _conv_out(w, layer.kernel, layer.stride, layer.padding),
            )
        elif layer.kind == "flatten":
            out = (int(np.prod(cur)),)
        else:
            out = cur
        shapes.append((cur, out))
        cur = out
    return shapes


class WeightStore:
    """All tensors of one network, shared by ``variants`` subnetworks.

    ``heads`` is the number of classifier copies: 1 when the classifier is
    shared across subnetworks, ``variants`` when each subnetwork owns one.
    """

    def __init__(self, arch: Architecture, variants: int = 1, heads: int = 1, dtype=np.float32):
        if variants < 1:
            raise ValueError("variants must be >= 1")
        if heads not in (1, variants):
            raise ValueError("heads must be 1 or equal to variants")
        self.arch = arch
        self.variants = variants
        self.heads = heads
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.per_variant: set[str] = set()
        self.per_head: set[str] = set()
        self.no_decay: set[str] = set()
        self.version = 0
        maskable = []
        for idx, (layer, (ishape, oshape)) in enumerate(zip(arch.layers, layer_shapes(arch))):
            if layer.kind in ("batchnorm", "classifier") and layer.maskable:
                raise ValueError(f"layer {idx}: {layer.kind} layers are never maskable")
            if layer.kind == "dense":
                self.params[f"{idx}.weight"] = np.zeros((layer.units, ishape[0]), self.dtype)
                self.params[f"{idx}.bias"] = np.zeros((variants, layer.units), self.dtype)
                self.per_variant.add(f"{idx}.bias")
            elif layer.kind == "conv":
                self.params[f"{idx}.weight"] = np.zeros(
                    (layer.units, ishape[0], layer.kernel, layer.kernel), self.dtype
                )
            elif layer.kind == "batchnorm":
                c = ishape[0]
                for name, fill in (("gamma", 1.0), ("beta", 0.0)):
                    self.params[f"{idx}.{name}"] = np.full((variants, c), fill, self.dtype)
                    self.per_variant.add(f"{idx}.{name}")
                    self.no_decay.add(f"{idx}.{name}")
                self.buffers[f"{idx}.running_mean"] = np.zeros((variants, c), self.dtype)
                self.buffers[f"{idx}.running_var"] = np.ones((variants, c), self.dtype)
            elif layer.kind == "classifier":
                self.params[f"{idx}.weight"] = np.zeros((heads, layer.units, ishape[0]), self.dtype)
                self.params[f"{idx}.bias"] = np.zeros((heads, layer.units), self.dtype)
                self.per_head |= {f"{idx}.weight", f"{idx}.bias"}
            if layer.kind in ("dense", "conv") and layer.maskable is not False:
                maskable.append(f"{idx}.weight")
        self.maskable: tuple[str, ...] = tuple(maskable)
        self.classifier_index = len(arch.layers) - 1

    # -- layout helpers -------------------------------------------------
    @property
    def mask_shapes(self) -> list[tuple[int, ...]]:
        return [self.params[name].shape for name in self.maskable]

    @property
    def n_maskable(self) -> int:
        return int(sum(self.params[name].size for name in self.maskable))

    def param_count(self) -> int:
        """Size of the network itself: per-subnetwork tensors count once, whatever ``variants`` is."""
        total = 0
        for name, p in self.params.items():
            if name in self.per_variant or name in self.per_head:
                total += p[0].size
            else:
                total += p.size
        return int(total)

    def stored_param_count(self) -> int:
        """Every stored parameter, including all per-subnetwork copies."""
        return int(sum(p.size for p in self.params.values()))

    @property
    def classifier_names(self) -> tuple[str, str]:
        i = self.classifier_index
        return f"{i}.weight", f"{i}.bias"

    def freeze_classifier(self) -> None:
        self.frozen |= set(self.classifier_names)

    @property
    def classifier_frozen(self) -> bool:
        return set(self.classifier_names) <= self.frozen

    def head_index(self, variant: int) -> int:
        return variant if self.heads > 1 else 0

    def view(self, name: str, variant: int) -> np.ndarray:
        """The slice of ``name`` used by subnetwork ``variant`` (a numpy view)."""
        p = self.params[name]
        if name in self.per_variant:
            return p[variant]
        if name in self.per_head:
            return p[self.head_index(variant)]
        return p

    def parameters(self, variant: int = 0) -> dict[str, np.ndarray]:
        """Trainable views for one subnetwork; frozen tensors are left out."""
        return {name: self.view(name, variant) for name in self.params if name not in self.frozen}

    def copy(self) -> "WeightStore":
        return copy.deepcopy(self)

    def equals(self, other: "WeightStore") -> bool:
        """Bit-exact comparison of layout and every tensor."""
        if (
            self.arch != other.arch
            or self.variants != other.variants
            or self.heads != other.heads
            or self.dtype != other.dtype
            or self.frozen != other.frozen
            or self.params.keys() != other.params.keys()
            or self.buffers.keys() != other.buffers.keys()
        ):
            return False
        for a, b in ((self.params, other.params), (self.buffers, other.buffers)):
            for k in a:
                if a[k].shape != b[k].shape or a[k].tobytes() != b[k].tobytes():
                    return False
        return True


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_network(
    arch: Architecture,
    seed: int,
    variants: int = 1,
    heads: int = 1,
    frozen_classifier: bool = False,
    dtype=np.float32,
) -> WeightStore:
    """Build a store and draw dense/conv/classifier weights from a fan-in scaled normal."""
    store = WeightStore(arch, variants=variants, heads=heads, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name in sorted(store.params, key=_param_order):
        if name.endswith(".weight"):
            p = store.params[name]
            if name in store.per_head:
                for h in range(p.shape[0]):
                    p[h] = he_normal(rng, p.shape[1:], store.dtype)
            else:
                p[...] = he_normal(rng, p.shape, store.dtype)
    if frozen_classifier:
        store.freeze_classifier()
    return store


def _param_order(name: str):
    idx, rest = name.split(".", 1)
    return int(idx), rest


# -- layer primitives -----------------------------------------------------


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C*k*k)
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * kernel * kernel)


def _col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int, padding: int) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = dcols.shape[1:3]
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dcols.dtype)
    d = dcols.reshape(b, ho, wo, c, kernel, kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0):
    """Bias-free convolution; returns (output, im2col columns)."""
    cout, _, k, _ = weight.shape
    cols = _im2col(x, k, stride, padding)
    out = cols @ weight.reshape(cout, -1).T
    return out.transpose(0, 3, 1, 2), cols


def conv2d_weight_grad(dout: np.ndarray, cols: np.ndarray, weight_shape) -> np.ndarray:
    cout = weight_shape[0]
    dout_r = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    return (dout_r.T @ cols.reshape(-1, cols.shape[-1])).reshape(weight_shape)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, update_stats: bool = True):
    """Normalise over every axis except the channel axis (axis 1).

    In train mode with ``update_stats`` the running buffers are updated in place.
    Returns ``(y, cache)``; ``cache["xhat"]`` is the normalised input.
    """
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            n = x.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            running_mean *= 1 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mean
            running_var *= 1 - BN_MOMENTUM
            running_var += BN_MOMENTUM * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y, {"xhat": xhat, "inv_std": inv_std, "axes": axes, "shape": shape}


def batchnorm_backward(dy, gamma, cache):
    xhat, inv_std, axes, shape = cache["xhat"], cache["inv_std"], cache["axes"], cache["shape"]
    n = dy.size // dy.shape[1]
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    dx = (
        inv_std.reshape(shape)
        / n
        * (n * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    )
    return dx, dgamma, dbeta


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# -- network forward/backward ----------------------------------------------


@dataclass
class ForwardCache:
    store: WeightStore
    version: int
    variant: int
    records: list
    effective: dict
    mask_layers: dict
    weight_scale: float
    logits: np.ndarray


@dataclass
class GradRecord:
    params: dict[str, np.ndarray]
    effective: dict[str, np.ndarray] = field(default_factory=dict)  # dL/d(mask*weight)
    loss: float | None = None


def _check_mask(store: WeightStore, mask) -> dict:
    if mask is None:
        return {}
    layers = mask.layers if hasattr(mask, "layers") else tuple(mask)
    if len(layers) != len(store.maskable):
        raise ValueError(f"mask has {len(layers)} layers, store has {len(store.maskable)} maskable layers")
    out = {}
    for name, m in zip(store.maskable, layers):
        if m.shape != store.params[name].shape:
            raise ValueError(f"mask shape {m.shape} does not match {name} {store.params[name].shape}")
        out[name] = m
    return out


def forward(
    store: WeightStore,
    x: np.ndarray,
    mask=None,
    variant: int = 0,
    mode: str = "eval",
    *,
    weight_scale: float = 1.0,
    update_stats: bool = True,
):
    """Run the network for subnetwork ``variant``.

    ``mask`` (a ``Mask`` or a sequence of boolean arrays aligned with
    ``store.maskable``) zeroes weights before use. ``weight_scale`` multiplies
    the masked weights (inverted dropout). Returns ``(logits, cache)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0 <= variant < store.variants:
        raise IndexError(f"variant {variant} out of range for {store.variants} variants")
    train = mode == "train"
    masks = _check_mask(store, mask)
    h = np.asarray(x, dtype=store.dtype)
    expected = tuple(store.arch.input_shape)
    if h.shape[1:] != expected:
        if h.ndim == 2 and int(np.prod(expected)) == h.shape[1]:
            h = h.reshape((h.shape[0],) + expected)
        else:
            raise ValueError(f"input shape {h.shape[1:]} does not match {expected}")
    records = []
    effective = {}
    for idx, layer in enumerate(store.arch.layers):
        kind = layer.kind
        if kind in ("dense", "conv"):
            name = f"{idx}.weight"
            w = store.params[name]
            if name in masks:
                w = w * masks[name]
            if weight_scale != 1.0:
                w = w * store.dtype.type(weight_scale)
            effective[name] = w
            if kind == "dense":
                out = h @ w.T + store.params[f"{idx}.bias"][variant]
                records.append(h)
            else:
                out, cols = conv2d(h, w, layer.stride, layer.padding)
                records.append((h.shape, cols))
            h = out
        elif kind == "batchnorm":
            h, bn_cache = batchnorm_forward(
                h,
                store.params[f"{idx}.gamma"][variant],
                store.params[f"{idx}.beta"][variant],
                store.buffers[f"{idx}.running_mean"][variant],
                store.buffers[f"{idx}.running_var"][variant],
                train,
                update_stats,
            )
            records.append(bn_cache)
        elif kind == "relu":
            records.append(h > 0)
            h = np.maximum(h, 0)
        elif kind == "flatten":
            records.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        else:  # classifier
            hi = store.head_index(variant)
            records.append(h)
            h = h @ store.params[f"{idx}.weight"][hi].T + store.params[f"{idx}.bias"][hi]
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("non-finite logits")
    cache = ForwardCache(store, store.version, variant, records, effective, masks, weight_scale, h)
    return h, cache


def backward(cache: ForwardCache, labels=None, *, grad_logits=None) -> GradRecord:
    """Gradients of the mean cross-entropy (or of a supplied upstream gradient).

    Every parameter gets an entry, frozen ones included; masked-out weight
    entries are exactly zero. ``GradRecord.effective`` holds gradients with
    respect to the masked effective weights, which edge-pop turns into score
    gradients.
    """
    store = cache.store
    if cache.version != store.version:
        raise StaleCacheError("forward cache was produced before the last parameter update")
    loss = None
    if grad_logits is None:
        if labels is None:
            raise ValueError("need labels or grad_logits")
        loss, g = softmax_cross_entropy(cache.logits, np.asarray(labels))
    else:
        g = np.asarray(grad_logits, dtype=store.dtype)
        if g.shape != cache.logits.shape:
            raise ValueError(f"grad_logits shape {g.shape} does not match logits {cache.logits.shape}")
    v = cache.variant
    grads: dict[str, np.ndarray] = {}
    effective: dict[str, np.ndarray] = {}
    for idx in range(len(store.arch.layers) - 1, -1, -1):
        layer = store.arch.layers[idx]
        rec = cache.records[idx]
        kind = layer.kind
        if kind == "classifier":
            hi = store.head_index(v)
            grads[f"{idx}.weight"] = g.T @ rec
            grads[f"{idx}.bias"] = g.sum(axis=0)
            g = g @ store.params[f"{idx}.weight"][hi]
        elif kind == "flatten":
            g = g.reshape(rec)
        elif kind == "relu":
            g = g * rec
        elif kind == "batchnorm":
            g, dgamma, dbeta = batchnorm_backward(g, store.params[f"{idx}.gamma"][v], rec)
            grads[f"{idx}.gamma"] = dgamma
            grads[f"{idx}.beta"] = dbeta
        else:
            name = f"{idx}.weight"
            w_eff = cache.effective[name]
            if kind == "dense":
                dw_eff = g.T @ rec
                grads[f"{idx}.bias"] = g.sum(axis=0)
                g = g @ w_eff if idx > 0 else None
            else:
                x_shape, cols = rec
                dw_eff = conv2d_weight_grad(g, cols, w_eff.shape)
                if idx > 0:
                    dcols = g.transpose(0, 2, 3, 1) @ w_eff.reshape(w_eff.shape[0], -1)
                    g = _col2im(dcols, x_shape, layer.kernel, layer.stride, layer.padding)
            effective[name] = dw_eff
            dw = dw_eff
            if cache.weight_scale != 1.0:
                dw = dw * store.dtype.type(cache.weight_scale)
            if name in cache.mask_layers:
                dw = dw * cache.mask_layers[name]
            grads[name] = dw
        if g is None:
            break
    return GradRecord(params=grads, effective=effective, loss=loss)


# -- optimiser ----------------------------------------------------------------


@dataclass
class SgdState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.lr * self.decay ** sum(self.epoch >= m for m in self.milestones)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
    *,
    no_decay=frozenset(),
    frozen=frozenset(),
    update_masks: dict[str, np.ndarray] | None = None,
) -> None:
    """In-place momentum SGD: ``v = mu*v + g + wd*w``, ``w -= lr*v``.

    ``params`` maps names to (views of) the tensors to update. Entries outside
    ``update_masks[name]`` keep their exact values and a zero velocity.
    """
    lr = state.current_lr()
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, w in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        wd = 0.0 if name in no_decay else state.weight_decay
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        v *= state.momentum
        v += g
        if wd:
            v += wd * w
        m = None if update_masks is None else update_masks.get(name)
        if m is None:
            w -= lr * v
        else:
            v *= m
            np.subtract(w, lr * v, out=w, where=m)


def store_sgd_step(store: WeightStore, grads: GradRecord, state: SgdState, variant: int = 0, update_masks=None):
    """Apply one SGD step to subnetwork ``variant`` of ``store`` and bump its version."""
    sgd_step(
        store.parameters(variant),
        grads.params,
        state,
        no_decay=store.no_decay,
        frozen=store.frozen,
        update_masks=update_masks,
    )
    store.version += 1
