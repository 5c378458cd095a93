"""Stacked UnICORNN layers with dropout, an affine readout and losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import (
    ConfigurationError,
    LayerParams,
    LayerState,
    ModelConfig,
    StateMeter,
    Trajectory,
    _batched_seq,
    input_transform,
    layer_forward,
)


@dataclass
class Model:
    config: ModelConfig
    layers: List[LayerParams]
    readout_W: np.ndarray
    readout_b: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.L:
            raise ConfigurationError(f"{len(self.layers)} layers given for L={cfg.L}")
        for l, p in enumerate(self.layers):
            if p.m != cfg.m or p.d_in != cfg.layer_input_dim(l):
                raise ConfigurationError(
                    f"layer {l + 1}: V has shape {p.V.shape}, expected "
                    f"({cfg.m}, {cfg.layer_input_dim(l)})")
            if cfg.has_skip(l) != (p.lam is not None):
                raise ConfigurationError(f"layer {l + 1}: residual matrix presence mismatch")
        self.readout_W = np.atleast_2d(np.asarray(self.readout_W, dtype=np.float64))
        self.readout_b = np.asarray(self.readout_b, dtype=np.float64)
        if self.readout_W.shape != (cfg.out_dim, cfg.m) or self.readout_b.shape != (cfg.out_dim,):
            raise ConfigurationError(
                f"readout shapes {self.readout_W.shape}/{self.readout_b.shape} do not match "
                f"out_dim={cfg.out_dim}, m={cfg.m}")

    def parameters(self) -> dict:
        """Named views of every trainable array, in a stable order."""
        out = {}
        for l, p in enumerate(self.layers):
            for name, arr in p.arrays().items():
                out[f"layers.{l}.{name}"] = arr
        out["readout.W"] = self.readout_W
        out["readout.b"] = self.readout_b
        return out

    def copy(self) -> "Model":
        return Model(self.config, [p.copy() for p in self.layers],
                     self.readout_W.copy(), self.readout_b.copy())


@dataclass
class DropoutMask:
    """One mask per inter-layer connection, shared by every time step.

    ``masks[l]`` scales the output of layer l+1 before layer l+2 reads it;
    entries are 0 or 1/(1-p).
    """

    masks: List[np.ndarray]

    @classmethod
    def sample(cls, config: ModelConfig, rng: np.random.Generator,
               batch: Optional[int] = None) -> "DropoutMask":
        p = config.dropout
        shape = (config.m,) if batch is None else (batch, config.m)
        masks = []
        for _ in range(config.L - 1):
            keep = rng.random(shape) >= p
            masks.append(keep / (1.0 - p))
        return cls(masks)


@dataclass
class LayerCache:
    final: LayerState
    inputs: np.ndarray
    skip: Optional[np.ndarray]
    ax: np.ndarray
    trajectory: Optional[Trajectory] = None


@dataclass
class ForwardCache:
    layers: List[LayerCache]
    top: np.ndarray                      # y^L_1..y^L_N, (N, B, m)
    masks: Optional[DropoutMask]
    squeeze: bool
    meter: Optional[StateMeter] = None
    extra: dict = field(default_factory=dict)


def model_forward(model: Model, input_seq, train: bool = False,
                  mask: Optional[DropoutMask] = None, store: bool = False,
                  meter: Optional[StateMeter] = None):
    """Run the stack and the readout.

    Returns ``(outputs, cache)``. Outputs are ``(N, [B,] out_dim)`` for a
    sequence readout and ``([B,] out_dim)`` for a final-step readout. The
    cache keeps, per layer, the final state, the layer's input sequence and
    its input transform; with ``store`` the full trajectories as well.
    """
    cfg = model.config
    u = np.asarray(input_seq, dtype=np.float64)
    squeeze = u.ndim == 2
    u = _batched_seq(u, cfg.d)
    N, B, _ = u.shape
    if N == 0:
        raise ConfigurationError("input sequence is empty")
    if train and cfg.dropout > 0.0 and cfg.L > 1 and mask is None:
        raise ConfigurationError("training with dropout requires a DropoutMask")
    masks = mask.masks if (train and mask is not None) else None
    if masks is not None:
        masks = [np.broadcast_to(mk, (B, cfg.m)) if np.ndim(mk) == 1 else mk for mk in masks]

    outs = []          # layer outputs as read by later layers (masked)
    caches = []
    x = u
    if meter is not None:
        meter.hold_inputs(u)
    for l, p in enumerate(model.layers):
        skip = outs[cfg.skip_source(l)] if cfg.has_skip(l) else None
        ax = input_transform(p, x, skip)
        if meter is not None:
            meter.hold_inputs(ax)
        final, ys, traj = layer_forward(LayerState.zeros(cfg.m, B), x, p, cfg.dt[l], cfg.alpha,
                                        store=store, skip=skip, ax=ax, meter=meter)
        caches.append(LayerCache(final, x, skip, ax, traj))
        if l < cfg.L - 1 and masks is not None:
            ys = ys * masks[l]
        outs.append(ys)
        x = ys
    top = x
    out = readout(model, top)
    cache = ForwardCache(caches, top, mask if masks is not None else None, squeeze, meter)
    if squeeze:
        out = out[:, 0] if cfg.readout == "sequence" else out[0]
    return out, cache


def readout(model: Model, top: np.ndarray) -> np.ndarray:
    if model.config.readout == "final":
        return top[-1] @ model.readout_W.T + model.readout_b
    return top @ model.readout_W.T + model.readout_b


def mse_loss(pred, target):
    """E = (1/N) sum_n 0.5*|pred_n - target_n|^2, averaged over the batch.

    Returns ``(loss, dE/dpred)``. Accepts ``(N, k)`` or ``(N, B, k)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim < 2:
        raise ValueError("expected (N, k) or (N, B, k) arrays")
    n_avg = pred.shape[0] * (pred.shape[1] if pred.ndim == 3 else 1)
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)) / n_avg, diff / n_avg


def cross_entropy_loss(logits, label):
    """Softmax cross-entropy (mean over the batch) and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(label))
    K = z.shape[1]
    if K < 2:
        raise ValueError("need at least two classes")
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range [0, {K})")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - shifted[rows, labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def nrmse(pred, target) -> float:
    """Root-mean-square error divided by the root-mean-square of the target."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    scale = np.sqrt(np.mean(target ** 2))
    if scale == 0.0:
        raise ValueError("NRMSE undefined for an all-zero target")
    return float(np.sqrt(np.mean((pred - target) ** 2)) / scale)
