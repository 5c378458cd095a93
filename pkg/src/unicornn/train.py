"""Initialization, optimizers and the mini-batch training loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backward import model_backward
from .core import ConfigurationError, LayerParams, ModelConfig, NumericalStabilityError
from .model import DropoutMask, Model, cross_entropy_loss, model_forward, mse_loss, nrmse

KAIMING_A = 8.0


def kaiming_bound(fan_in: int, a: float = KAIMING_A) -> float:
    """Half-width of the Kaiming-uniform range for a leaky slope ``a``."""
    return float(np.sqrt(6.0 / ((1.0 + a * a) * fan_in)))


def init_params(config: ModelConfig, seed) -> Model:
    """Random model: w ~ U(0,1), b = 0, c ~ U(-0.1, 0.1), Kaiming-uniform V and lam.

    The readout is U(-1/sqrt(m), 1/sqrt(m)) for W and b.
    """
    rng = np.random.default_rng(seed)
    m = config.m
    layers = []
    for l in range(config.L):
        d_in = config.layer_input_dim(l)
        r = kaiming_bound(d_in)
        V = rng.uniform(-r, r, size=(m, d_in))
        w = rng.uniform(0.0, 1.0, size=m)
        c = rng.uniform(-0.1, 0.1, size=m)
        lam = None
        if config.has_skip(l):
            rl = kaiming_bound(m)
            lam = rng.uniform(-rl, rl, size=(m, m))
        layers.append(LayerParams(w, V, np.zeros(m), c, lam))
    s = 1.0 / np.sqrt(m)
    W = rng.uniform(-s, s, size=(config.out_dim, m))
    b = rng.uniform(-s, s, size=config.out_dim)
    return Model(config, layers, W, b)


def loss_and_grads(model: Model, inputs, targets, loss: str = "mse",
                   mask: Optional[DropoutMask] = None, reconstruct: bool = True):
    """Scalar loss and gradients for every entry of ``model.parameters()``.

    ``inputs`` is ``(N, B, d)``. For ``loss="mse"`` the targets are
    ``(N, B, k)`` with a sequence readout or ``(B, k)`` with a final-step
    readout; for ``loss="xent"`` they are ``(B,)`` class indices and the
    readout must be final-step. With a mask the forward runs in train mode.
    """
    cfg = model.config
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
        targets = np.asarray(targets)[:, None] if cfg.readout == "sequence" else np.asarray(targets)[None]
    out, cache = model_forward(model, x, train=mask is not None, mask=mask)
    top = cache.top
    N, B, m = top.shape
    if loss == "mse":
        value, g_out = mse_loss(out, targets)
    elif loss == "xent":
        if cfg.readout != "final":
            raise ConfigurationError("cross-entropy needs a final-step readout")
        value, g_out = cross_entropy_loss(out, targets)
    else:
        raise ConfigurationError(f"unknown loss {loss!r}")
    upstream = np.zeros((N, B, m))
    if cfg.readout == "final":
        g_W = g_out.T @ top[-1]
        g_b = g_out.sum(axis=0)
        upstream[-1] = g_out @ model.readout_W
    else:
        g2 = g_out.reshape(-1, g_out.shape[-1])
        g_W = g2.T @ top.reshape(-1, m)
        g_b = g2.sum(axis=0)
        upstream[:] = g_out @ model.readout_W
    layer_grads = model_backward(model, cache, upstream, reconstruct=reconstruct)
    grads = {}
    for l, g in enumerate(layer_grads):
        for name, arr in g.arrays().items():
            grads[f"layers.{l}.{name}"] = arr
    grads["readout.W"] = g_W
    grads["readout.b"] = g_b
    return value, grads


@dataclass
class OptimState:
    """Moment buffers and hyperparameters for Adam (SGD uses only ``lr``)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float, **kw) -> "OptimState":
        st = cls(lr=lr, **kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def _check_grads(params, grads):
    for k, p in params.items():
        if k not in grads:
            continue
        g = grads[k]
        if np.shape(g) != p.shape:
            raise ConfigurationError(f"gradient for {k} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalStabilityError(f"non-finite gradient for {k}")


def adam_step(params: dict, grads: dict, opt: OptimState) -> dict:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    _check_grads(params, grads)
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for k, p in params.items():
        if k not in grads:
            continue
        g = grads[k]
        if k not in opt.m:
            opt.m[k] = np.zeros_like(p)
            opt.v[k] = np.zeros_like(p)
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        p -= opt.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
    return params


def sgd_step(params: dict, grads: dict, opt: OptimState) -> dict:
    _check_grads(params, grads)
    opt.step += 1
    for k, p in params.items():
        if k in grads:
            p -= opt.lr * grads[k]
    return params


def clip_by_norm(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


@dataclass
class TrainConfig:
    """Training-loop settings.

    ``lr_drop_epoch`` (1-based) is the first epoch that runs at
    ``lr / lr_drop_factor``. ``freeze`` lists parameter-name prefixes that
    are not updated. ``task`` selects the loss and validation metric.
    """

    epochs: int = 10
    lr: float = 1e-3
    lr_drop_epoch: Optional[int] = None
    lr_drop_factor: float = 10.0
    batch_size: int = 32
    seed: int = 0
    valid_fraction: float = 0.1
    optimizer: str = "adam"
    clip: Optional[float] = None
    task: str = "regression"
    freeze: Sequence[str] = ()

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr >= 0.0:
            raise ConfigurationError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr_drop_factor <= 0.0:
            raise ConfigurationError("lr_drop_factor must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in ("regression", "classification"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ConfigurationError("valid_fraction outside [0, 1)")


@dataclass
class FitResult:
    model: Model
    history: list
    failed: bool = False
    best_epoch: int = 0
    message: str = ""
    lr_trace: list = field(default_factory=list)


def _batch(data, idx):
    x = np.ascontiguousarray(data.inputs[idx].transpose(1, 0, 2))
    t = data.targets[idx]
    if t.ndim == 3:
        t = t.transpose(1, 0, 2)
    return x, t


def predict(model: Model, data, batch_size: int = 256) -> np.ndarray:
    """Eval-mode outputs for every sequence, sequence axis first."""
    outs = []
    for s in range(0, len(data), batch_size):
        x, _ = _batch(data, np.arange(s, min(s + batch_size, len(data))))
        out, _ = model_forward(model, x)
        outs.append(out.transpose(1, 0, 2) if out.ndim == 3 else out)
    return np.concatenate(outs, axis=0)


def evaluate(model: Model, data, task: str, batch_size: int = 256) -> dict:
    """Loss plus accuracy (classification) or NRMSE and MSE (regression)."""
    pred = predict(model, data, batch_size)
    if task == "classification":
        loss, _ = cross_entropy_loss(pred, data.targets)
        acc = float(np.mean(np.argmax(pred, axis=1) == data.targets))
        return {"loss": loss, "accuracy": acc}
    t = data.targets
    diff = pred - t
    return {"loss": 0.5 * float(np.mean(np.sum(diff * diff, axis=-1))),
            "mse": float(np.mean(diff * diff)), "nrmse": nrmse(pred, t)}


def _selection(task):
    if task == "classification":
        return "accuracy", lambda new, best: new > best
    return "nrmse", lambda new, best: new < best


def fit(model: Model, train_data, valid_data, tcfg: TrainConfig, log=None) -> FitResult:
    """Train with seeded shuffling and keep the best-validation checkpoint.

    History rows are dicts with keys epoch, split, metric, value, wall_time.
    A non-finite loss or gradient stops training; the last finite
    checkpoint is returned with ``failed=True``.
    """
    if len(train_data) == 0 or len(valid_data) == 0:
        raise ConfigurationError("training and validation data must be non-empty")
    tcfg.validate()
    cfg = model.config
    loss_kind = "xent" if tcfg.task == "classification" else "mse"
    model = model.copy()
    params = model.parameters()
    trainable = {k: p for k, p in params.items()
                 if not any(k.startswith(f) for f in tcfg.freeze)}
    opt = OptimState.for_params(trainable, tcfg.lr)
    step_fn = adam_step if tcfg.optimizer == "adam" else sgd_step
    seeds = np.random.SeedSequence(tcfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    mask_rng = np.random.default_rng(seeds[1])
    key, better = _selection(tcfg.task)

    t0 = time.perf_counter()
    history = []

    def record(epoch, split, metrics):
        now = time.perf_counter() - t0
        for name, value in metrics.items():
            history.append({"epoch": epoch, "split": split, "metric": name,
                            "value": float(value), "wall_time": now})

    best = model.copy()
    best_score = None
    best_epoch = 0
    last_finite = model.copy()
    lr_trace = []
    result = None
    for epoch in range(1, tcfg.epochs + 1):
        if tcfg.lr_drop_epoch is not None and epoch == tcfg.lr_drop_epoch:
            opt.lr = opt.lr / tcfg.lr_drop_factor
        lr_trace.append(opt.lr)
        order = shuffle_rng.permutation(len(train_data))
        total, count = 0.0, 0
        try:
            for s in range(0, len(order), tcfg.batch_size):
                idx = order[s:s + tcfg.batch_size]
                x, t = _batch(train_data, idx)
                mask = None
                if cfg.dropout > 0.0 and cfg.L > 1:
                    mask = DropoutMask.sample(cfg, mask_rng, batch=len(idx))
                value, grads = loss_and_grads(model, x, t, loss_kind, mask=mask)
                if not np.isfinite(value):
                    raise NumericalStabilityError(f"non-finite training loss at epoch {epoch}")
                if tcfg.clip is not None:
                    grads = clip_by_norm(grads, tcfg.clip)
                step_fn(trainable, grads, opt)
                for k, p in trainable.items():
                    if not np.all(np.isfinite(p)):
                        raise NumericalStabilityError(f"parameter {k} became non-finite")
                total += value * len(idx)
                count += len(idx)
            valid = evaluate(model, valid_data, tcfg.task)
            if not all(np.isfinite(v) for v in valid.values()):
                raise NumericalStabilityError(f"non-finite validation metric at epoch {epoch}")
        except NumericalStabilityError as exc:
            result = FitResult(last_finite, history, True, best_epoch, str(exc), lr_trace)
            break
        record(epoch, "train", {"loss": total / count})
        record(epoch, "valid", valid)
        if log is not None:
            log(epoch, total / count, valid)
        last_finite = model.copy()
        if best_score is None or better(valid[key], best_score):
            best_score = valid[key]
            best = model.copy()
            best_epoch = epoch
    if result is None:
        result = FitResult(best, history, False, best_epoch, "", lr_trace)
    return result


# Per-task hyperparameters; anything not listed falls back to the
# ModelConfig/TrainConfig defaults.
PRESETS = {
    "npcifar": {"lr": 3.14e-2, "dropout": 0.1, "batch_size": 30, "dt": 0.126, "alpha": 13.0},
    "psmnist-128": {"lr": 1.14e-3, "dropout": 0.1, "batch_size": 64, "dt": 0.482, "alpha": 12.53},
    "psmnist-256": {"lr": 2.51e-3, "dropout": 0.1, "batch_size": 32, "dt": 0.19, "alpha": 30.65},
    "imdb": {"lr": 1.67e-4, "dropout": 0.61, "batch_size": 32, "dt": 0.205, "dt_first": 6.6e-3,
             "alpha": 0.0},
    "eigenworms": {"lr": 8.59e-3, "dropout": 0.0, "batch_size": 8, "dt": 3.43e-2,
                   "dt_first": 2.81e-5, "alpha": 0.0},
    "healthcare-rr": {"lr": 3.98e-3, "dropout": 0.1, "batch_size": 32, "dt": 1.1e-2, "alpha": 9.0},
    "healthcare-hr": {"lr": 2.88e-3, "dropout": 0.1, "batch_size": 32, "dt": 4.6e-2, "alpha": 10.0},
    # desk-scale Lorenz 96 recipes
    "lorenz-f09": {"task": "lorenz96", "F": 0.9, "L": 2, "m": 32, "epochs": 60, "lr": 5e-3,
                   "batch_size": 16, "dt": 0.3, "alpha": 1.0, "lr_drop_epoch": 45},
    "lorenz-f8": {"task": "lorenz96", "F": 8.0, "L": 2, "m": 32, "epochs": 60, "lr": 5e-3,
                  "batch_size": 16, "dt": 0.3, "alpha": 1.0, "lr_drop_epoch": 45},
    # synthetic noise-padded classification (content 32 steps, pad to 1000)
    "noise": {"task": "noise", "L": 3, "m": 64, "epochs": 8, "lr": 3e-3, "batch_size": 32,
              "dt": 0.126, "alpha": 13.0},
}
