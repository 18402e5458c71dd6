"""Server-side gradient inversion: recover a stand-in dataset whose simulated
local update matches a received stale update, then retrain the current global
model on it to estimate the unstale update.

The simulated local update is differentiated exactly by unrolling all local
steps (full batch) and backpropagating through them; JAX supplies that
derivative, while the NumPy implementation in `nn` stays the reference for
the training math itself (the two are cross-checked in tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

from .nn import ConfigError, Dataset, ModelArch, OptConfig, ParamVector, local_update

HUBER_DELTA = 1e-6


class InversionError(RuntimeError):
    """Inversion aborted after repeated non-finite iterates."""


@dataclass
class GIConfig:
    """Knobs for one inversion run.

    d_rec_fraction sizes the recovered set relative to the (estimated) client
    dataset; unroll_steps should equal the client's local_steps. The plateau
    fields optionally stop when the best disparity stalls (off by default, so
    stopping is stop_tol-or-max_iters as documented).
    """

    d_rec_fraction: float = 0.5
    max_iters: int = 600
    inner_lr: float = 0.05
    stop_tol: float = 0.0
    sparsification_rate: float = 0.95
    unroll_steps: int = 5
    plateau_patience: int | None = None
    plateau_rel_improvement: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.d_rec_fraction <= 1.0):
            raise ConfigError("d_rec_fraction must be in (0, 1]")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.inner_lr <= 0:
            raise ConfigError("inner_lr must be > 0")
        if self.stop_tol < 0:
            raise ConfigError("stop_tol must be >= 0")
        if not (0.0 <= self.sparsification_rate < 1.0):
            raise ConfigError("sparsification_rate must be in [0, 1)")
        if self.unroll_steps < 1:
            raise ConfigError("unroll_steps must be >= 1")


@dataclass(frozen=True)
class SparsityMask:
    """Sorted positions of the largest-|value| coordinates of a source vector."""

    indices: tuple[int, ...]
    source_len: int

    def __post_init__(self):
        if len(self.indices) < 1:
            raise ValueError("mask must keep at least one coordinate")
        if any(i < 0 or i >= self.source_len for i in self.indices):
            raise ValueError("mask index out of range")
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("mask indices must be sorted and unique")

    @property
    def k(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass
class GIResult:
    d_rec: Dataset
    final_disparity: float
    iters_used: int
    mask: SparsityMask


def top_k_mask(target_delta: np.ndarray, rate: float) -> SparsityMask:
    """Keep round((1-rate)*len) coordinates of largest magnitude, min 1;
    magnitude ties break toward the lower index."""
    target_delta = np.asarray(target_delta, dtype=np.float64)
    if not (0.0 <= rate < 1.0):
        raise ValueError("rate must be in [0, 1)")
    n = target_delta.size
    k = max(1, int(round((1.0 - rate) * n)))
    # stable sort on -|v| keeps the original (lower-index-first) order on ties
    order = np.argsort(-np.abs(target_delta), kind="stable")
    return SparsityMask(tuple(sorted(int(i) for i in order[:k])), n)


def disparity(candidate_delta: np.ndarray, target_delta: np.ndarray,
              mask: SparsityMask) -> float:
    """Mean absolute difference over the masked coordinates only."""
    candidate_delta = np.asarray(candidate_delta, dtype=np.float64)
    target_delta = np.asarray(target_delta, dtype=np.float64)
    if candidate_delta.shape != target_delta.shape:
        raise ValueError("disparity: vector length mismatch")
    if mask.source_len != candidate_delta.size:
        raise ValueError("disparity: mask built for a different vector length")
    idx = mask.as_array()
    return float(np.mean(np.abs(candidate_delta[idx] - target_delta[idx])))


def l1_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Unmasked mean absolute difference (the E1/E2 metric)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("l1_distance: vector length mismatch")
    return float(np.mean(np.abs(u - v)))


# --- unrolled simulation of the local update, in JAX ---

def _unpack(values, layer_shapes):
    out, off = [], 0
    for d_in, d_out in layer_shapes:
        W = values[off:off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = values[off:off + d_out]
        off += d_out
        out.append((W, b))
    return out


def _forward_jax(values, X, layer_shapes, activation):
    h = X
    layers = _unpack(values, layer_shapes)
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = jnp.maximum(h, 0.0) if activation == "relu" else jnp.tanh(h)
    return h


def _ce_jax(values, X, Y, layer_shapes, activation):
    logp = jax.nn.log_softmax(_forward_jax(values, X, layer_shapes, activation), axis=1)
    return -jnp.mean(jnp.sum(Y * logp, axis=1))


def _simulated_delta(X, Y, w0, lr, momentum, prox_mu, layer_shapes, activation, steps):
    """Mirror of nn.local_update for full-batch training, differentiable in
    (X, Y). fedprox references the starting weights, as the sim does when it
    launches a round from the current global snapshot."""
    w = w0
    v = jnp.zeros_like(w0)
    for _ in range(steps):
        g = jax.grad(_ce_jax)(w, X, Y, layer_shapes, activation)
        g = g + prox_mu * (w - w0)
        v = momentum * v + g
        w = w - lr * v
    return w - w0


@partial(jax.jit, static_argnames=("layer_shapes", "activation", "steps"))
def _objective_grad(x, ylog, w0, target, mask_idx, lr, momentum, prox_mu,
                    layer_shapes, activation, steps):
    def objective(x_, ylog_):
        Y = jax.nn.softmax(ylog_, axis=1)
        delta = _simulated_delta(x_, Y, w0, lr, momentum, prox_mu,
                                 layer_shapes, activation, steps)
        diff = (delta - target)[mask_idx]
        a = jnp.abs(diff)
        huber = jnp.where(a <= HUBER_DELTA,
                          diff * diff / (2.0 * HUBER_DELTA),
                          a - HUBER_DELTA / 2.0)
        return jnp.mean(huber), jnp.mean(a)

    (loss, plain_l1), grads = jax.value_and_grad(objective, argnums=(0, 1),
                                                 has_aux=True)(x, ylog)
    return loss, plain_l1, grads


def simulated_local_delta(base: ParamVector, x: np.ndarray, y_soft: np.ndarray,
                          opt: OptConfig, steps: int | None = None) -> np.ndarray:
    """Full-batch local update delta via the JAX path (used by invert and in
    the cross-check against nn.local_update)."""
    arch = base.arch
    momentum = opt.momentum if opt.kind == "sgd_momentum" else 0.0
    prox_mu = opt.prox_mu if opt.kind == "fedprox" else 0.0
    delta = _simulated_delta(
        jnp.asarray(x), jnp.asarray(y_soft), jnp.asarray(base.values),
        opt.learning_rate, momentum, prox_mu,
        tuple(arch.layer_shapes()), arch.activation,
        steps if steps is not None else opt.local_steps)
    return np.asarray(delta)


def inversion_objective_value(base: ParamVector, x: np.ndarray, ylog: np.ndarray,
                              target: np.ndarray, mask: SparsityMask,
                              opt: OptConfig, steps: int) -> float:
    """Masked-L1 disparity of the simulated delta (finite-difference probes
    in tests differentiate this)."""
    y_soft = np.asarray(jax.nn.softmax(jnp.asarray(ylog), axis=1))
    delta = simulated_local_delta(base, x, y_soft, opt, steps)
    return disparity(delta, target, mask)


def invert(stale, base_snapshot: ParamVector, client_opt: OptConfig, cfg: GIConfig,
           warm: GIResult | None = None, d_rec_size: int | None = None,
           seed: int = 0) -> GIResult:
    """Recover a dataset whose simulated local update matches the stale delta.

    Features start uniform in [0,1] and labels uniform on the simplex (or
    both from `warm`); every iteration takes an Adam step on (features, label
    logits) through the unrolled local update, re-clips features to [0,1],
    and keeps labels on the simplex via the softmax reparameterization. The
    best iterate seen is what gets returned, so the reported disparity never
    exceeds the initial one. Stops at stop_tol or max_iters (plus the
    optional plateau rule).

    A non-finite iterate halves the inner learning rate and retries from the
    best point, up to 3 times.
    """
    arch = base_snapshot.arch
    target = np.asarray(stale.delta, dtype=np.float64)
    if target.size != arch.num_params:
        raise ValueError("stale delta length does not match the base snapshot arch")
    mask = top_k_mask(target, cfg.sparsification_rate)

    if warm is not None:
        x = np.clip(warm.d_rec.features.copy(), 0.0, 1.0)
        ylog = np.log(np.maximum(warm.d_rec.soft_labels(), 1e-12))
        n_rec = x.shape[0]
    else:
        if d_rec_size is None:
            raise ConfigError("invert needs d_rec_size when no warm start is given")
        n_rec = max(1, int(d_rec_size))
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xA1]))
        x = rng.uniform(0.0, 1.0, (n_rec, arch.input_dim))
        ylog = np.zeros((n_rec, arch.num_classes))

    momentum = client_opt.momentum if client_opt.kind == "sgd_momentum" else 0.0
    prox_mu = client_opt.prox_mu if client_opt.kind == "fedprox" else 0.0
    static = dict(layer_shapes=tuple(arch.layer_shapes()), activation=arch.activation,
                  steps=cfg.unroll_steps)
    w0 = jnp.asarray(base_snapshot.values)
    target_j = jnp.asarray(target)
    mask_j = jnp.asarray(mask.as_array())

    x = jnp.asarray(x)
    ylog = jnp.asarray(ylog)
    adam = _AdamState.zeros_like(x, ylog)
    inner_lr = cfg.inner_lr
    retries = 0

    best = np.inf
    best_x, best_ylog = x, ylog
    iters_used = 0
    last_improve_iter = 0

    for i in range(cfg.max_iters + 1):
        loss, plain_l1, (gx, gy) = _objective_grad(
            x, ylog, w0, target_j, mask_j,
            client_opt.learning_rate, momentum, prox_mu, **static)
        l1 = float(plain_l1)
        if not np.isfinite(l1) or not bool(jnp.all(jnp.isfinite(gx)) & jnp.all(jnp.isfinite(gy))):
            retries += 1
            if retries > 3:
                raise InversionError(
                    f"non-finite inversion state after {retries - 1} learning-rate "
                    f"halvings (iteration {i}, best disparity {best})"
                )
            inner_lr *= 0.5
            x, ylog = best_x, best_ylog
            adam = _AdamState.zeros_like(x, ylog)
            continue
        if l1 < best * (1.0 - cfg.plateau_rel_improvement):
            last_improve_iter = i
        if l1 < best:
            best, best_x, best_ylog = l1, x, ylog
        if best <= cfg.stop_tol:
            break
        if (cfg.plateau_patience is not None
                and i - last_improve_iter >= cfg.plateau_patience):
            break
        if i == cfg.max_iters:
            break
        x, ylog, adam = adam.step(x, ylog, gx, gy, inner_lr)
        x = jnp.clip(x, 0.0, 1.0)
        iters_used = i + 1

    features = np.clip(np.asarray(best_x), 0.0, 1.0)
    soft = np.asarray(jax.nn.softmax(jnp.asarray(best_ylog), axis=1))
    soft = soft / soft.sum(axis=1, keepdims=True)
    d_rec = Dataset(features, soft, arch.num_classes)
    return GIResult(d_rec=d_rec, final_disparity=best, iters_used=iters_used, mask=mask)


@dataclass
class _AdamState:
    mx: jnp.ndarray
    vx: jnp.ndarray
    my: jnp.ndarray
    vy: jnp.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, x, ylog):
        return cls(jnp.zeros_like(x), jnp.zeros_like(x),
                   jnp.zeros_like(ylog), jnp.zeros_like(ylog))

    def step(self, x, ylog, gx, gy, lr):
        t = self.t + 1
        mx = self.beta1 * self.mx + (1 - self.beta1) * gx
        vx = self.beta2 * self.vx + (1 - self.beta2) * gx * gx
        my = self.beta1 * self.my + (1 - self.beta1) * gy
        vy = self.beta2 * self.vy + (1 - self.beta2) * gy * gy
        c1, c2 = 1 - self.beta1 ** t, 1 - self.beta2 ** t
        x = x - lr * (mx / c1) / (jnp.sqrt(vx / c2) + self.eps)
        ylog = ylog - lr * (my / c1) / (jnp.sqrt(vy / c2) + self.eps)
        return x, ylog, _AdamState(mx, vx, my, vy, t, self.beta1, self.beta2, self.eps)


def estimate_unstale(w_now: ParamVector, d_rec: Dataset, client_opt: OptConfig) -> np.ndarray:
    """Delta of a local update on the recovered data from the current global
    weights: the estimated unstale update. Runs full batch regardless of the
    client's batch size, matching the inversion's simulation."""
    opt = OptConfig(kind=client_opt.kind, learning_rate=client_opt.learning_rate,
                    momentum=client_opt.momentum, prox_mu=client_opt.prox_mu,
                    local_steps=client_opt.local_steps, batch_size="full")
    ref = w_now if opt.kind == "fedprox" else None
    trained = local_update(w_now, d_rec, opt, global_ref=ref)
    return trained.values - w_now.values


def recovery_quality(d_rec: Dataset, d_true: Dataset):
    """Privacy-side quality of the recovered set against the true data.

    Each recovered sample is matched to its nearest true sample by MSE;
    returns (mean best-match MSE, mean PSNR over pairs with PSNR =
    10*log10(1/MSE), and the total-variation overlap between the recovered
    argmax-label histogram and the true class histogram).
    """
    if d_rec.dim != d_true.dim:
        raise ValueError("recovery_quality: feature dim mismatch")
    diffs = d_rec.features[:, None, :] - d_true.features[None, :, :]
    mse_matrix = np.mean(diffs * diffs, axis=2)
    best = mse_matrix.min(axis=1)
    mean_mse = float(np.mean(best))
    with np.errstate(divide="ignore"):
        psnr = float(np.mean(10.0 * np.log10(1.0 / best)))

    C = d_true.num_classes
    rec_hist = np.bincount(d_rec.hard_labels(), minlength=C) / d_rec.n
    true_hist = np.bincount(d_true.hard_labels(), minlength=C) / d_true.n
    label_acc = float(np.minimum(rec_hist, true_hist).sum())
    return mean_mse, psnr, label_acc
