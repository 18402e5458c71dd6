"""Dense MLP substrate: forward pass, exact backprop, losses with soft labels,
and the local-training optimizers every other module computes through.

Everything here is a pure function of its inputs (plus explicit seeds);
parameters live in flat float64 vectors so aggregation, compensation and
inversion can treat models as plain arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")
OPT_KINDS = ("sgd", "sgd_momentum", "fedprox")

CHECKPOINT_MAGIC = b"SFLW"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Dimension mismatch between arch, params, or data."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class ModelArch:
    """MLP layout: layer_dims = (input, hidden..., output), hidden activation."""

    layer_dims: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ShapeError("layer_dims needs at least input and output dims")
        if any(d <= 0 for d in dims):
            raise ShapeError(f"layer_dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_dims[:-1], self.layer_dims[1:]))


@dataclass
class ParamVector:
    """Flat parameter (or update) vector tied to an architecture."""

    values: np.ndarray
    arch: ModelArch

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError(f"param vector must be 1-D, got shape {self.values.shape}")
        if self.values.size != self.arch.num_params:
            raise ShapeError(
                f"param vector length {self.values.size} != arch size {self.arch.num_params}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("param vector contains non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)


@dataclass
class OptConfig:
    """Local-training recipe for one client round.

    momentum is only meaningful for sgd_momentum, prox_mu only for fedprox;
    anything else is rejected so configs stay unambiguous.
    """

    kind: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.0
    prox_mu: float = 0.0
    local_steps: int = 5
    batch_size: int | str = "full"

    def __post_init__(self):
        if self.kind not in OPT_KINDS:
            raise ConfigError(f"optimizer kind must be one of {OPT_KINDS}, got {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.kind != "sgd_momentum" and self.momentum != 0.0:
            raise ConfigError("momentum is only used with kind = sgd_momentum")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be >= 0")
        if self.kind != "fedprox" and self.prox_mu != 0.0:
            raise ConfigError("prox_mu is only used with kind = fedprox")
        if self.local_steps <= 0:
            raise ConfigError("local_steps must be >= 1")
        if self.batch_size != "full":
            if not isinstance(self.batch_size, int) or self.batch_size <= 0:
                raise ConfigError('batch_size must be a positive integer or "full"')


@dataclass
class Dataset:
    """Feature matrix in [0,1]^d plus hard class indices or soft label rows."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"features must be a nonempty 2-D matrix, got {self.features.shape}")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be >= 1")
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            labels = labels.astype(np.int64)
            if labels.shape[0] != self.features.shape[0]:
                raise ShapeError("label count does not match feature rows")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError("hard labels must lie in [0, num_classes)")
        elif labels.ndim == 2:
            labels = labels.astype(np.float64)
            if labels.shape != (self.features.shape[0], self.num_classes):
                raise ShapeError(
                    f"soft labels must be n x C = {self.features.shape[0]} x {self.num_classes}"
                )
            if np.any(labels < -1e-12):
                raise ValueError("soft labels must be nonnegative")
            if np.max(np.abs(labels.sum(axis=1) - 1.0)) > 1e-6:
                raise ValueError("soft label rows must sum to 1 within 1e-6")
        else:
            raise ShapeError("labels must be 1-D (hard) or 2-D (soft)")
        self.labels = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_soft(self) -> bool:
        return self.labels.ndim == 2

    def soft_labels(self) -> np.ndarray:
        """Labels as an n x C row-stochastic matrix (hard labels -> one-hot)."""
        if self.is_soft:
            return self.labels
        out = np.zeros((self.n, self.num_classes))
        out[np.arange(self.n), self.labels] = 1.0
        return out

    def hard_labels(self) -> np.ndarray:
        if self.is_soft:
            return np.argmax(self.labels, axis=1)
        return self.labels

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


# --- forward / loss / grad ---

def unpack_params(arch: ModelArch, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views, in layer order."""
    out, off = [], 0
    for d_in, d_out in arch.layer_shapes():
        W = values[off:off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = values[off:off + d_out]
        off += d_out
        out.append((W, b))
    return out


def pack_params(arch: ModelArch, layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W).ravel())
        parts.append(np.asarray(b).ravel())
    values = np.concatenate(parts)
    if values.size != arch.num_params:
        raise ShapeError("packed layers do not match arch size")
    return values


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def forward(arch: ModelArch, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs. Pure and deterministic."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != arch.input_dim:
        raise ShapeError(
            f"feature width {features.shape[-1] if features.ndim == 2 else '?'} "
            f"!= input dim {arch.input_dim}"
        )
    if params.arch != arch:
        raise ShapeError("params do not belong to this arch")
    h = features
    layers = unpack_params(arch, params.values)
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = _activate(h, arch.activation)
    return h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def loss_and_grad(arch: ModelArch, params: ParamVector, dataset: Dataset):
    """Mean softmax cross-entropy over the dataset and its exact gradient.

    Soft label rows are scored against the full distribution; hard labels are
    the one-hot special case. Returns (loss, ParamVector gradient).
    """
    if dataset.n < 1:
        raise ValueError("dataset must be nonempty")
    if dataset.dim != arch.input_dim or dataset.num_classes != arch.num_classes:
        raise ShapeError("dataset shape does not match arch")
    X = dataset.features
    Y = dataset.soft_labels()
    n = X.shape[0]
    layers = unpack_params(arch, params.values)

    # forward, caching pre-activations and layer inputs
    h = X
    inputs, preacts = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        preacts.append(z)
        h = _activate(z, arch.activation) if i < len(layers) - 1 else z
    logits = h
    logp = _log_softmax(logits)
    loss = float(-np.mean(np.sum(Y * logp, axis=1)))

    # backward
    delta = (np.exp(logp) - Y) / n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW = inputs[i].T @ delta
        gb = delta.sum(axis=0)
        grads[i] = (gW, gb)
        if i > 0:
            delta = delta @ W.T
            if arch.activation == "relu":
                delta = delta * (preacts[i - 1] > 0)
            else:
                delta = delta * (1.0 - np.tanh(preacts[i - 1]) ** 2)
    return loss, ParamVector(pack_params(arch, grads), arch)


def finite_diff_grad(arch: ModelArch, params: ParamVector, dataset: Dataset,
                     step: float = 1e-5) -> ParamVector:
    """Central-difference gradient of the loss; test oracle only.

    Symmetric in the sign of step by construction.
    """
    if step == 0:
        raise ValueError("step must be nonzero")
    step = abs(step)
    base = params.values
    grad = np.zeros_like(base)
    probe = base.copy()
    for i in range(base.size):
        probe[i] = base[i] + step
        lo_plus, _ = _loss_only(arch, probe, dataset)
        probe[i] = base[i] - step
        lo_minus, _ = _loss_only(arch, probe, dataset)
        probe[i] = base[i]
        grad[i] = (lo_plus - lo_minus) / (2.0 * step)
    return ParamVector(grad, arch)


def _loss_only(arch: ModelArch, values: np.ndarray, dataset: Dataset):
    pv = ParamVector(values.copy(), arch)
    logits = forward(arch, pv, dataset.features)
    logp = _log_softmax(logits)
    loss = float(-np.mean(np.sum(dataset.soft_labels() * logp, axis=1)))
    return loss, logits


# --- local training ---

def local_update(base: ParamVector, dataset: Dataset, opt: OptConfig,
                 global_ref: ParamVector | None = None, seed: int = 0,
                 velocity: np.ndarray | None = None, return_velocity: bool = False):
    """Run opt.local_steps optimizer steps from `base` and return the weights.

    fedprox adds prox_mu * (w - global_ref) to the gradient and requires
    global_ref; the other kinds reject it. Minibatch order is seeded, so the
    result is a pure function of (inputs, seed). Pass `velocity` /
    `return_velocity` to carry momentum state across calls.
    """
    if opt.kind == "fedprox":
        if global_ref is None:
            raise ConfigError("fedprox requires global_ref")
        if global_ref.arch != base.arch:
            raise ShapeError("global_ref arch mismatch")
    elif global_ref is not None:
        raise ConfigError(f"global_ref is only valid for fedprox, not {opt.kind}")

    arch = base.arch
    w = base.values.copy()
    v = np.zeros_like(w) if velocity is None else velocity.copy()
    mom = opt.momentum if opt.kind == "sgd_momentum" else 0.0

    batches = _batch_iter(dataset, opt, seed)
    for _ in range(opt.local_steps):
        batch = next(batches)
        _, g = loss_and_grad(arch, ParamVector(w, arch), batch)
        grad = g.values
        if opt.kind == "fedprox":
            grad = grad + opt.prox_mu * (w - global_ref.values)
        v = mom * v + grad
        w = w - opt.learning_rate * v

    trained = ParamVector(w, arch)
    if return_velocity:
        return trained, v
    return trained


def _batch_iter(dataset: Dataset, opt: OptConfig, seed: int):
    if opt.batch_size == "full":
        while True:
            yield dataset
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5F]))
        bs = int(opt.batch_size)
        while True:
            order = rng.permutation(dataset.n)
            for start in range(0, dataset.n, bs):
                idx = order[start:start + bs]
                if idx.size:
                    yield dataset.subset(idx)


def init_params(arch: ModelArch, seed: int = 0) -> ParamVector:
    """Glorot-normal weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x11]))
    layers = []
    for d_in, d_out in arch.layer_shapes():
        W = rng.normal(0.0, np.sqrt(2.0 / (d_in + d_out)), (d_in, d_out))
        layers.append((W, np.zeros(d_out)))
    return ParamVector(pack_params(arch, layers), arch)


# --- checkpoint format: "SFLW", u32 version, u32 layer count, dims, f32 values ---

def save_checkpoint(path, params: ParamVector) -> None:
    dims = params.arch.layer_dims
    payload = params.values.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(payload)


def load_checkpoint(path, activation: str = "relu") -> ParamVector:
    """Read a checkpoint back; the on-disk format carries no activation kind."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{n_layers}I", blob, 12)
    arch = ModelArch(tuple(int(d) for d in dims), activation)
    off = 12 + 4 * n_layers
    values = np.frombuffer(blob, dtype="<f4", count=arch.num_params, offset=off)
    if values.size != arch.num_params or len(blob) != off + 4 * arch.num_params:
        raise ValueError("checkpoint payload size mismatch")
    return ParamVector(values.astype(np.float64), arch)
