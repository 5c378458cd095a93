"""Hand-derived backpropagation through time for one layer.

Two routes give the same gradients: one reads a stored trajectory, the
other rebuilds each state with the exact inverse step while sweeping
backwards, so hidden-state memory does not grow with sequence length.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    ConfigurationError,
    LayerParams,
    LayerState,
    NumericalStabilityError,
    StateMeter,
    Trajectory,
    _batched_seq,
    input_transform,
    sigma_hat_prime,
)


@dataclass
class AdjointState:
    """Running adjoints (dE/dy, dE/dz) at backward index ``k``."""

    delta_y: np.ndarray
    delta_z: np.ndarray
    k: int = 0


@dataclass
class LayerGrads:
    """Gradients of one layer's parameters and inputs.

    ``x`` (and ``skip``) match the shape of the inputs that drove the layer.
    ``initial`` holds the adjoint at step 0, i.e. dE/d(y_0, z_0).
    """

    w: np.ndarray
    V: np.ndarray
    b: np.ndarray
    c: np.ndarray
    x: np.ndarray
    lam: Optional[np.ndarray] = None
    skip: Optional[np.ndarray] = None
    initial: Optional[AdjointState] = None

    def arrays(self) -> dict:
        out = {"w": self.w, "V": self.V, "b": self.b, "c": self.c}
        if self.lam is not None:
            out["lam"] = self.lam
        return out


def _upstream(upstream, N, B, m):
    up = _batched_seq(upstream, m, "upstream")
    if up.shape[0] != N or up.shape[1] != B:
        raise ConfigurationError(
            f"upstream has {up.shape[0]} steps x {up.shape[1]} batch; expected {N} x {B}")
    return np.ascontiguousarray(up)


def _assemble(params, dt, x, skip, dA, gw, gh, gy0, gz0, squeeze):
    dA2 = dA.reshape(-1, dA.shape[-1])
    g_V = dA2.T @ x.reshape(-1, x.shape[-1])
    g_x = dA @ params.V
    g_lam = g_skip = None
    if params.lam is not None:
        g_lam = dA2.T @ skip.reshape(-1, skip.shape[-1])
        g_skip = dA @ params.lam
    g_c = gh.sum(axis=0) * dt * sigma_hat_prime(params.c)
    if squeeze:
        g_x = g_x[:, 0]
        g_skip = None if g_skip is None else g_skip[:, 0]
        initial = AdjointState(gy0[0], gz0[0], dA.shape[0])
    else:
        initial = AdjointState(gy0, gz0, dA.shape[0])
    return LayerGrads(gw.sum(axis=0), g_V, dA2.sum(axis=0), g_c, g_x, g_lam, g_skip, initial)


def layer_backward_stored(traj: Trajectory, upstream, params: LayerParams, dt: float,
                          alpha: float) -> LayerGrads:
    """BPTT over a stored trajectory.

    ``upstream[n-1]`` is dE/dy_n (zeros where the loss ignores step n).
    """
    squeeze = traj.y.ndim == 2
    ys = traj.y[:, None, :] if squeeze else traj.y
    zs = traj.z[:, None, :] if squeeze else traj.z
    x = _batched_seq(traj.inputs, params.d_in)
    skip = None if traj.skip_inputs is None else _batched_seq(traj.skip_inputs, params.m, "skip")
    ax = input_transform(params, x, skip)
    N, B, m = ax.shape
    if ys.shape[0] != N + 1:
        raise ConfigurationError(f"trajectory has {ys.shape[0]} states for {N} inputs")
    up = _upstream(upstream, N, B, m)
    dA = np.empty_like(ax)
    gw, gh, gy0, gz0 = (np.empty((B, m)) for _ in range(4))
    _kernels.backward_stored(ax, params.w, params.effective_step(dt), float(alpha),
                             np.ascontiguousarray(ys), np.ascontiguousarray(zs),
                             up, dA, gw, gh, gy0, gz0)
    return _assemble(params, dt, x, skip, dA, gw, gh, gy0, gz0, squeeze)


def layer_backward_reconstructing(final: LayerState, inputs, upstream, params: LayerParams,
                                  dt: float, alpha: float, skip=None, ax=None,
                                  meter: Optional[StateMeter] = None) -> LayerGrads:
    """BPTT that rebuilds hidden states from the final one via the inverse step.

    Only the current (y, z) per lane is held while sweeping. ``ax`` may pass
    a retained input-transform buffer; it is recomputed otherwise.
    """
    x = _batched_seq(inputs, params.d_in)
    s = None if skip is None else _batched_seq(skip, params.m, "skip")
    if ax is None:
        ax = input_transform(params, x, s)
    N, B, m = ax.shape
    squeeze = final.y.ndim == 1
    y = np.array(final.y, dtype=np.float64, ndmin=2, copy=True)
    z = np.array(final.z, dtype=np.float64, ndmin=2, copy=True)
    if y.shape != (B, m):
        raise ConfigurationError(f"final state shape {y.shape} != ({B}, {m})")
    up = _upstream(upstream, N, B, m)
    dA = np.empty_like(ax)
    gw, gh, gy0, gz0 = (np.empty((B, m)) for _ in range(4))
    if meter is not None:
        meter.hold(y, z)
    ok = _kernels.backward_reconstructing(ax, params.w, params.effective_step(dt), float(alpha),
                                          y, z, up, dA, gw, gh, gy0, gz0)
    if meter is not None:
        meter.release(y, z)
    if not ok:
        raise NumericalStabilityError(
            f"reconstructed hidden state exceeded {_kernels.DRIFT_LIMIT:g} in magnitude")
    return _assemble(params, dt, x, s, dA, gw, gh, gy0, gz0, squeeze)


def model_backward(model, cache, upstream_top, reconstruct: bool = True) -> list:
    """Backpropagate dE/dy^L_n through every layer, top to bottom.

    ``upstream_top`` is ``(N, [B,] m)``. Each layer's input gradient is
    routed to the layer(s) that produced it: the one directly below and,
    for residual layers, the skip source; masks are applied on the way.
    With ``reconstruct`` (default) hidden states are rebuilt with the
    inverse step; otherwise the cached trajectories are used.
    """
    cfg = model.config
    L = cfg.L
    if cache is None or len(cache.layers) != L:
        raise ConfigurationError("forward cache missing or built for a different depth")
    ups = [None] * L
    ups[L - 1] = _batched_seq(upstream_top, cfg.m, "upstream")
    grads = [None] * L
    masks = None if cache.masks is None else cache.masks.masks
    for l in range(L - 1, -1, -1):
        lc = cache.layers[l]
        if lc.inputs is None:
            raise ConfigurationError(f"layer {l + 1}: cached inputs missing")
        up = ups[l]
        if up is None:
            up = np.zeros_like(lc.ax)
        p = model.layers[l]
        if reconstruct:
            g = layer_backward_reconstructing(lc.final, lc.inputs, up, p, cfg.dt[l], cfg.alpha,
                                              skip=lc.skip, ax=lc.ax, meter=cache.meter)
        else:
            if lc.trajectory is None:
                raise ConfigurationError(f"layer {l + 1}: no stored trajectory; run forward with store=True")
            g = layer_backward_stored(lc.trajectory, up, p, cfg.dt[l], cfg.alpha)
        grads[l] = g
        if l > 0:
            gx = _batched_seq(g.x, cfg.m, "input gradient")
            if masks is not None:
                gx = gx * masks[l - 1]
            ups[l - 1] = gx if ups[l - 1] is None else ups[l - 1] + gx
        if g.skip is not None:
            src = cfg.skip_source(l)
            gs = _batched_seq(g.skip, cfg.m, "skip gradient")
            if masks is not None:
                gs = gs * masks[src]
            ups[src] = gs if ups[src] is None else ups[src] + gs
    return grads
