"""Regularised MSE training with mini-batch ADAM and step-decay annealing."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateData, InvalidArgument, NumericalFailure
from .cnn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from .cnn.network import build_network
from .seeds import stage_rng


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    eta0: float = 0.005
    anneal_rate: float = 0.75
    anneal_every: int = 20
    weight_decay: float = 7e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 20
    channel_weights: list = None
    eval_batch: int = 64

    def validate(self):
        if not 0 < self.anneal_rate <= 1:
            raise InvalidArgument("anneal_rate must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.anneal_every < 1 or self.eval_every < 1:
            raise InvalidArgument("batch_size, anneal_every, eval_every must be >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise InvalidArgument("weight_decay must be >= 0")
        return self


def lr_at(config, epoch):
    """Step decay: eta0 * zeta ** floor(epoch / anneal_every), epochs counted from 0."""
    return config.eta0 * config.anneal_rate ** (epoch // config.anneal_every)


def mse_loss(pred, target, channel_weights=None):
    """(1/N) sum_i ||y_i - yhat_i||^2 over whole fields, and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    if channel_weights is not None:
        w = np.asarray(channel_weights, dtype=np.float64).reshape(1, -1, *([1] * (pred.ndim - 2)))
        return float((w * diff * diff).sum() / n), 2.0 * w * diff / n
    return float((diff * diff).sum() / n), 2.0 * diff / n


def regularized_loss(mse, params, lam):
    """MSE plus the L2 penalty over every learnable value; returns (loss, penalty gradient)."""
    if lam < 0:
        raise InvalidArgument("weight decay must be >= 0")
    values = params.values if hasattr(params, "values") else np.asarray(params, dtype=np.float64)
    return float(mse + lam * (values @ values)), 2.0 * lam * values


@dataclass
class OptimizerState:
    M: np.ndarray
    V: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place ADAM update; moves parameters against the gradient."""
    values = params.values if hasattr(params, "values") else params
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != values.shape or state.M.shape != values.shape:
        raise InvalidArgument("gradient and moment buffers must match the parameters")
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        where = params.block_of(idx) if hasattr(params, "block_of") else f"index {idx}"
        raise NumericalFailure(f"non-finite gradient in {where}")
    state.step += 1
    k = state.step
    state.M *= beta1
    state.M += (1.0 - beta1) * grads
    state.V *= beta2
    state.V += (1.0 - beta2) * grads * grads
    mhat = state.M / (1.0 - beta1**k)
    vhat = state.V / (1.0 - beta2**k)
    values -= lr * mhat / (np.sqrt(vhat) + eps)
    if hasattr(params, "bump"):
        params.bump()
    return params, state


def rmse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument("prediction and target sets differ in shape")
    if pred.shape[0] < 1:
        raise InvalidArgument("rmse needs at least one pair")
    return float(np.sqrt(((pred - target) ** 2).sum() / pred.shape[0]))


def r_squared(pred, target):
    """1 - SS_res / SS_tot over all entries of all output channels jointly."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgument("prediction and target sets differ in shape")
    if pred.shape[0] < 1:
        raise InvalidArgument("r_squared needs at least one pair")
    mean_field = target.mean(axis=0)
    ss_tot = ((target - mean_field) ** 2).sum()
    if ss_tot == 0:
        raise DegenerateData("targets are all identical; R^2 undefined")
    return float(1.0 - ((pred - target) ** 2).sum() / ss_tot)


@dataclass
class Normalizer:
    """Per-cell mean removal and per-channel scaling, fit on training data."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def fit(cls, x, y):
        def parts(a):
            mean = a.mean(axis=0)
            scale = (a - mean).std(axis=(0, 2, 3))
            scale = np.where(scale > 0, scale, 1.0)
            return mean, scale

        return cls(*parts(x), *parts(y))

    @classmethod
    def identity(cls, in_shape, out_shape):
        (h, w, c), (ho, wo, co) = in_shape, out_shape
        return cls(np.zeros((c, h, w)), np.ones(c), np.zeros((co, ho, wo)), np.ones(co))

    def x_in(self, x):
        return (x - self.x_mean) / self.x_scale[:, None, None]

    def y_in(self, y):
        return (y - self.y_mean) / self.y_scale[:, None, None]

    def y_out(self, z):
        return z * self.y_scale[:, None, None] + self.y_mean

    def arrays(self):
        return {"x_mean": self.x_mean, "x_scale": self.x_scale, "y_mean": self.y_mean, "y_scale": self.y_scale}


@dataclass
class Surrogate:
    """A built network, its parameters, and the data normaliser it was trained with."""

    net: object
    params: object
    normalizer: Normalizer
    epoch: int = 0
    opt_state: OptimizerState = None

    def predict(self, x, batch_size=64):
        x = np.asarray(x, dtype=np.float64)
        return self.normalizer.y_out(self.net.predict(self.params, self.normalizer.x_in(x), batch_size))

    __call__ = predict


def evaluate(surrogate, ds, batch_size=64):
    if len(ds) < 1:
        raise InvalidArgument("evaluation set is empty")
    pred = surrogate.predict(ds.x, batch_size)
    return rmse(pred, ds.y), r_squared(pred, ds.y), pred


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    test_rmse: float
    test_r2: float


HISTORY_FIELDS = ["epoch", "lr", "train_loss", "test_rmse", "test_r2"]


def history_csv(rows):
    lines = [",".join(HISTORY_FIELDS)]
    for r in rows:
        d = asdict(r)
        lines.append(",".join(repr(d[k]) if isinstance(d[k], float) else str(d[k]) for k in HISTORY_FIELDS))
    return "\n".join(lines) + "\n"


def check_schema(net, ds):
    h, w, c = net.spec.in_shape
    ho, wo, co = net.shapes[-1]
    if ds.x.shape[1:] != (c, h, w) or ds.y.shape[1:] != (co, ho, wo):
        raise InvalidArgument(
            f"dataset {ds.x.shape[1:]}->{ds.y.shape[1:]} does not match network {(c, h, w)}->{(co, ho, wo)}"
        )


def fit(surrogate, train_ds, test_ds, config, log=None):
    """Train from ``surrogate.epoch`` up to ``config.epochs``.

    Each epoch shuffles with a stream keyed on (seed, epoch), so a resumed
    run retraces an uninterrupted one. Returns the history rows written
    every ``eval_every`` epochs and at the final epoch.
    """
    config.validate()
    net, params = surrogate.net, surrogate.params
    check_schema(net, train_ds)
    check_schema(net, test_ds)
    norm = surrogate.normalizer
    xs = norm.x_in(train_ds.x)
    ys = norm.y_in(train_ds.y)
    if surrogate.opt_state is None:
        surrogate.opt_state = OptimizerState.zeros(len(params))
    state = surrogate.opt_state
    n = len(train_ds)
    history = []
    for epoch in range(surrogate.epoch, config.epochs):
        lr = lr_at(config, epoch)
        order = stage_rng(config.seed, "shuffle", epoch).permutation(n)
        losses = []
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            pred, tape = net.forward(params, xs[idx], train=True)
            mse, dpred = mse_loss(pred, ys[idx], config.channel_weights)
            loss, dpen = regularized_loss(mse, params, config.weight_decay)
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at epoch {epoch + 1}, batch {b0 // config.batch_size}")
            grads, _ = net.backward(params, tape, dpred)
            grads += dpen
            try:
                adam_step(params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            except NumericalFailure as exc:
                raise NumericalFailure(f"epoch {epoch + 1}, batch {b0 // config.batch_size}: {exc}") from exc
            losses.append(loss)
        surrogate.epoch = epoch + 1
        if surrogate.epoch % config.eval_every == 0 or surrogate.epoch == config.epochs:
            test_rmse, test_r2, _ = evaluate(surrogate, test_ds, config.eval_batch)
            row = HistoryRow(surrogate.epoch, lr, float(np.mean(losses)), test_rmse, test_r2)
            history.append(row)
            if log is not None:
                log(row)
    return history


def surrogate_to_bytes(surrogate, names_in=(), names_out=()):
    """FRM1 bytes holding the network, normaliser, optimiser moments and epoch."""
    arrays = dict(surrogate.normalizer.arrays())
    meta = {"epoch": surrogate.epoch, "names_in": list(names_in), "names_out": list(names_out)}
    if surrogate.opt_state is not None:
        arrays["adam_M"] = surrogate.opt_state.M
        arrays["adam_V"] = surrogate.opt_state.V
        meta["adam_step"] = surrogate.opt_state.step
    return checkpoint_to_bytes(surrogate.net.spec, surrogate.params, meta, arrays)


def surrogate_from_bytes(buf, expected_spec=None):
    """Inverse of :func:`surrogate_to_bytes`; returns ``(surrogate, meta)``."""
    spec, params, meta, arrays = checkpoint_from_bytes(buf, expected_spec)
    net = build_network(spec)
    norm = Normalizer(arrays["x_mean"], arrays["x_scale"], arrays["y_mean"], arrays["y_scale"])
    state = None
    if "adam_M" in arrays:
        state = OptimizerState(arrays["adam_M"], arrays["adam_V"], int(meta.get("adam_step", 0)))
    return Surrogate(net, params, norm, int(meta.get("epoch", 0)), state), meta
