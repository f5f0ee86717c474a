"""Minimal dense feedforward networks: ReLU hidden layers, optional logistic
output, inverted dropout, Adam mini-batch training and hand-written
backpropagation.

Weights are stored as (fan_in, fan_out) matrices so a batch ``x`` of shape
(n, fan_in) maps through ``x @ W + b``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

OUTPUTS = ("identity", "logistic")
LOSSES = ("squared", "logistic")
PROB_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    output: str = "identity"
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError(f"need input, >=1 hidden and output widths, got {widths}")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 200
    learning_rate: float = 1e-3
    patience: int = 5
    dropout_rate: float = 0.0
    tol: float = 1e-6
    # > 0: hold out this fraction of rows, watch its loss and restore the best weights
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list
    biases: list

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def n_in(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.spec.layer_widths[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta) -> None:
        i = 0
        for p in self.params:
            p[...] = np.reshape(theta[i:i + p.size], p.shape)
            i += p.size


def mlp_init(spec: MlpSpec) -> Mlp:
    """He-uniform weights (bound sqrt(6 / fan_in)) for layers feeding a ReLU,
    uniform with bound 1 / sqrt(fan_in) for the output layer, zero biases.

    The smaller output scale keeps the untrained network close to a constant,
    so little of the random initial function survives training.
    """
    gen = np.random.default_rng(np.random.SeedSequence(spec.seed))
    weights, biases = [], []
    widths = spec.layer_widths
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt((1.0 if i == last else 6.0) / fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(spec, weights, biases)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(m: Mlp, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {m.n_in}")
    return x, single


def forward_cache(m: Mlp, x, dropout: float = 0.0, rng: Rng | None = None):
    """Batch forward pass keeping what ``backward`` needs.

    ``x`` must already be a 2-d float array. Returns (output, cache) where the
    output is post-activation and ``cache`` holds layer inputs, ReLU masks
    (already multiplied by the dropout mask) and the pre-activation output.
    """
    acts = [x]
    gates = []
    h = x
    last = len(m.weights) - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ W
        z += b
        if i == last:
            break
        gate = (z > 0).astype(np.float64)
        if dropout > 0.0:
            keep = rng.uniform(z.shape) >= dropout
            gate *= keep / (1.0 - dropout)
        h = z * gate
        gates.append(gate)
        acts.append(h)
    out = _sigmoid(z) if m.spec.output == "logistic" else z
    return out, (acts, gates, z)


def backward(m: Mlp, cache, d_out):
    """Gradients of a scalar objective given d objective / d output.

    For a logistic head ``d_out`` must be taken with respect to the
    pre-activation (see ``loss_and_grad``). Returns (param grads in
    ``Mlp.params`` order, d objective / d input).
    """
    acts, gates, _ = cache
    grads = [None] * (2 * len(m.weights))
    delta = d_out
    for i in range(len(m.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ m.weights[i].T
        if i > 0:
            delta *= gates[i - 1]
    return grads, delta


def forward(m: Mlp, x, train_mode: bool = False, rng: Rng | None = None):
    x, single = _as_batch(m, x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    dropout = m.spec.dropout_rate if train_mode else 0.0
    if dropout > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    out, _ = forward_cache(m, x, dropout, rng)
    return out[0] if single else out


def loss_and_grad(out, z_out, y, loss: str, reduction: str = "mean"):
    """Loss value and its derivative w.r.t. the output pre-activation."""
    scale = 1.0 / len(y) if reduction == "mean" else 1.0
    if loss == "squared":
        resid = out - y
        return scale * float(np.sum(resid * resid)), (2.0 * scale) * resid
    if loss == "logistic":
        p = np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
        value = -scale * float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
        g = out - y
        g[(out < PROB_CLAMP) | (out > 1.0 - PROB_CLAMP)] = 0.0
        return value, scale * g
    raise ValueError(f"unknown loss {loss!r}")


def _check_loss(m: Mlp, loss: str):
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if loss == "logistic" and m.spec.output != "logistic":
        raise ValueError("logistic loss needs a logistic output head")


def _targets(m: Mlp, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != m.n_out:
        raise ValueError(f"target width {y.shape[1]} does not match network output {m.n_out}")
    return y


def batch_loss(m: Mlp, x, y, loss: str) -> float:
    x, _ = _as_batch(m, x)
    y = _targets(m, y)
    out, cache = forward_cache(m, x)
    return loss_and_grad(out, cache[2], y, loss)[0]


def gradient(m: Mlp, x, y, loss: str, reduction: str = "mean") -> list:
    """Analytic gradient of the batch loss (dropout disabled)."""
    _check_loss(m, loss)
    x, _ = _as_batch(m, x)
    y = _targets(m, y)
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in count")
    out, cache = forward_cache(m, x)
    _, d_out = loss_and_grad(out, cache[2], y, loss, reduction)
    return backward(m, cache, d_out)[0]


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= step * m / (np.sqrt(v) + self.eps)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


def fit_loop(params, batch_step, n: int, cfg: TrainConfig, rng: Rng, val_loss=None) -> TrainHistory:
    """Shared epoch loop: shuffle once per epoch, Adam on each mini-batch,
    stop when the monitored loss fails to improve by ``cfg.tol`` for
    ``cfg.patience`` consecutive epochs (``patience=0`` disables).

    ``batch_step(idx)`` returns (batch loss, grads aligned with ``params``).
    The monitored loss is the epoch-mean training loss, or ``val_loss()``
    when given; in that case the best parameters are restored at the end.
    """
    if n < 1:
        raise ValueError("empty training set")
    opt = Adam(params, cfg.learning_rate)
    hist = TrainHistory()
    best, wait, best_params = np.inf, 0, None
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            value, grads = batch_step(idx)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(grads)
            total += value * len(idx)
        hist.losses.append(total / n)
        monitored = hist.losses[-1]
        if val_loss is not None:
            monitored = val_loss()
            hist.val_losses.append(monitored)
        if monitored < best - cfg.tol:
            best, wait = monitored, 0
            if val_loss is not None:
                best_params = [p.copy() for p in params]
        else:
            wait += 1
            if cfg.patience and wait >= cfg.patience:
                hist.stopped_early = True
                break
    if best_params is not None:
        for p, b in zip(params, best_params):
            p[...] = b
    return hist


def train(m: Mlp, x, y, loss: str, cfg: TrainConfig, rng: Rng, history: TrainHistory | None = None) -> Mlp:
    """Fit a copy of ``m``; the input network is left untouched."""
    _check_loss(m, loss)
    x, _ = _as_batch(m, x)
    y = _targets(m, y)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in count")
    if loss == "logistic" and not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic loss needs targets in {0, 1}")
    fitted = m.copy()
    drop_rng = rng.child("dropout")
    val_loss = None
    n_val = int(round(cfg.validation_fraction * len(x)))
    if n_val >= 1 and len(x) - n_val >= 1:
        perm = rng.child("validation").permutation(len(x))
        x_val, y_val = x[perm[:n_val]], y[perm[:n_val]]
        x, y = x[perm[n_val:]], y[perm[n_val:]]

        def val_loss():
            out, cache = forward_cache(fitted, x_val)
            return loss_and_grad(out, cache[2], y_val, loss)[0]

    def step(idx):
        out, cache = forward_cache(fitted, x[idx], cfg.dropout_rate, drop_rng)
        value, d_out = loss_and_grad(out, cache[2], y[idx], loss)
        return value, backward(fitted, cache, d_out)[0]

    h = fit_loop(fitted.params, step, len(x), cfg, rng.child("order"), val_loss)
    if history is not None:
        history.losses[:] = h.losses
        history.val_losses[:] = h.val_losses
        history.stopped_early = h.stopped_early
    log.debug("trained %s for %d epochs, final loss %.4g", m.spec.layer_widths, h.epochs_run, h.losses[-1])
    return fitted


CHECKPOINT_VERSION = 1


def save_checkpoint(m: Mlp, path) -> None:
    """One JSON header line, then the parameters as raw little-endian float64
    in layer order (W0, b0, W1, b1, ...), each W row-major (fan_in, fan_out)."""
    header = {
        "format": "dyngpi-mlp",
        "version": CHECKPOINT_VERSION,
        "layer_widths": list(m.spec.layer_widths),
        "output": m.spec.output,
        "dropout_rate": m.spec.dropout_rate,
        "seed": m.spec.seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(m.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    header = json.loads(head)
    if header.get("format") != "dyngpi-mlp" or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint header {header}")
    spec = MlpSpec(tuple(header["layer_widths"]), header["output"], header["dropout_rate"], header["seed"])
    m = mlp_init(spec)
    theta = np.frombuffer(body, dtype="<f8")
    if theta.size != m.n_params:
        raise ValueError(f"checkpoint holds {theta.size} values, spec needs {m.n_params}")
    m.set_flat(theta.astype(np.float64))
    return m
