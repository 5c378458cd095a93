"""Single-layer UnICORNN recurrence: state types, forward/inverse steps.

One layer evolves m independent oscillators. With effective step
h = dt * sigma_hat(c) the symplectic Euler update is

    z_n = z_{n-1} - h * (tanh(w * y_{n-1} + V x_n + b) + alpha * y_{n-1})
    y_n = y_{n-1} + h * z_n

z is updated first from the old y, then y from the new z. The inverse
runs the same two lines backwards (y first, then z), which is what makes
reconstruction exact up to rounding.

Arrays are float64. Batched calls put the batch axis before the neuron
axis: states are ``(B, m)``, sequences are time-major ``(N, B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels


class ConfigurationError(ValueError):
    """Inconsistent shapes or hyperparameters."""


class NumericalStabilityError(FloatingPointError):
    """A computation left the range where its results can be trusted."""


def sigma_hat(u):
    """Smooth step modulation 0.5 + 0.5*tanh(u/2), in (0, 1)."""
    return 0.5 + 0.5 * np.tanh(np.asarray(u, dtype=np.float64) / 2.0)


def sigma_hat_prime(u):
    t = np.tanh(np.asarray(u, dtype=np.float64) / 2.0)
    return 0.25 * (1.0 - t * t)


@dataclass
class LayerParams:
    """Trainable weights of one layer.

    ``lam`` is the residual skip matrix, present only on layers that
    receive a skip connection.
    """

    w: np.ndarray
    V: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.lam is not None:
            self.lam = np.atleast_2d(np.asarray(self.lam, dtype=np.float64))
        self.validate()

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.V.shape[1]

    def validate(self):
        m = self.w.shape[0]
        if self.w.ndim != 1 or m < 1:
            raise ConfigurationError(f"w must be a non-empty vector, got shape {self.w.shape}")
        for name in ("b", "c"):
            arr = getattr(self, name)
            if arr.shape != (m,):
                raise ConfigurationError(f"{name} has shape {arr.shape}, expected ({m},)")
        if self.V.ndim != 2 or self.V.shape[0] != m:
            raise ConfigurationError(f"V has shape {self.V.shape}, expected ({m}, d_in)")
        if self.lam is not None and self.lam.shape != (m, m):
            raise ConfigurationError(f"lam has shape {self.lam.shape}, expected ({m}, {m})")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} contains non-finite entries")

    def arrays(self) -> dict:
        out = {"w": self.w, "V": self.V, "b": self.b, "c": self.c}
        if self.lam is not None:
            out["lam"] = self.lam
        return out

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.w.copy(), self.V.copy(), self.b.copy(), self.c.copy(),
            None if self.lam is None else self.lam.copy(),
        )

    def effective_step(self, dt: float) -> np.ndarray:
        return dt * sigma_hat(self.c)


@dataclass
class LayerState:
    """Position ``y`` and velocity ``z``; shape ``(m,)`` or ``(B, m)``."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.y.shape != self.z.shape:
            raise ConfigurationError(f"y {self.y.shape} and z {self.z.shape} differ in shape")

    @classmethod
    def zeros(cls, m: int, batch: Optional[int] = None) -> "LayerState":
        shape = (m,) if batch is None else (batch, m)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "LayerState":
        return LayerState(self.y.copy(), self.z.copy())


@dataclass
class ModelConfig:
    """Architecture and integrator hyperparameters.

    ``dt`` is one nominal step per layer (a scalar is broadcast).
    ``readout`` is ``"sequence"`` (per-step regression output) or
    ``"final"`` (classification from the last step).
    """

    L: int
    m: int
    d: int
    dt: Sequence[float]
    alpha: float = 1.0
    skip: Optional[int] = None
    dropout: float = 0.0
    out_dim: int = 1
    readout: str = "sequence"

    def __post_init__(self):
        if np.ndim(self.dt) == 0:
            self.dt = [float(self.dt)] * int(self.L)
        self.dt = [float(v) for v in self.dt]
        self.validate()

    def validate(self):
        if self.L < 1 or self.m < 1 or self.d < 1 or self.out_dim < 1:
            raise ConfigurationError("L, m, d and out_dim must all be >= 1")
        if len(self.dt) != self.L:
            raise ConfigurationError(f"dt has {len(self.dt)} entries for {self.L} layers")
        for i, v in enumerate(self.dt):
            if not 0.0 < v < 1.0:
                raise ConfigurationError(f"dt[{i}]={v} outside (0, 1)")
        if not self.alpha >= 0.0:
            raise ConfigurationError(f"alpha={self.alpha} must be non-negative")
        if self.skip is not None and not 2 <= self.skip < self.L:
            raise ConfigurationError(f"skip={self.skip} must satisfy 2 <= skip < L={self.L}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout={self.dropout} outside [0, 1)")
        if self.readout not in ("sequence", "final"):
            raise ConfigurationError(f"unknown readout {self.readout!r}")

    def layer_input_dim(self, layer: int) -> int:
        """Input width of 0-based ``layer``."""
        return self.d if layer == 0 else self.m

    def has_skip(self, layer: int) -> bool:
        """Whether 0-based ``layer`` receives a residual branch."""
        return self.skip is not None and layer + 1 > self.skip

    def skip_source(self, layer: int) -> int:
        """0-based index of the layer whose output feeds the residual branch."""
        return layer - self.skip


@dataclass
class Trajectory:
    """Stored states y_0..y_N, z_0..z_N and the per-step layer inputs.

    ``y``/``z`` have N+1 entries along axis 0 (index 0 is the initial
    state); ``inputs[n-1]`` drove the step from n-1 to n.
    """

    y: np.ndarray
    z: np.ndarray
    inputs: np.ndarray
    skip_inputs: Optional[np.ndarray] = None

    def __len__(self):
        return self.inputs.shape[0]

    def state(self, n: int) -> LayerState:
        return LayerState(self.y[n], self.z[n])

    @property
    def states(self) -> list:
        return [self.state(n) for n in range(1, len(self) + 1)]


def _batched_state(state: LayerState, m: int):
    y = state.y
    if y.shape[-1] != m:
        raise ConfigurationError(f"state width {y.shape[-1]} != layer width {m}")
    squeeze = y.ndim == 1
    if squeeze:
        return state.y[None, :].copy(), state.z[None, :].copy(), True
    return state.y.copy(), state.z.copy(), False


def _batched_seq(x: np.ndarray, width: int, name: str = "inputs"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[-1] != width:
        raise ConfigurationError(f"{name} shape {x.shape} incompatible with width {width}")
    return x


def input_transform(params: LayerParams, x: np.ndarray, skip: Optional[np.ndarray] = None):
    """V x_n + b (+ lam s_n) for every step at once; returns ``(N, B, m)``.

    This is the only dense part of a layer and has no sequential structure.
    """
    x = _batched_seq(x, params.d_in)
    ax = x @ params.V.T
    if params.lam is not None:
        if skip is None:
            raise ConfigurationError("layer has a residual matrix but no skip input was given")
        skip = _batched_seq(skip, params.m, "skip inputs")
        ax += skip @ params.lam.T
    elif skip is not None:
        raise ConfigurationError("skip input given to a layer without a residual matrix")
    ax += params.b
    return np.ascontiguousarray(ax)


def _step_pre(params: LayerParams, y, x, skip):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ConfigurationError(f"input width {x.shape[-1]} != {params.d_in}")
    a = params.w * y + x @ params.V.T + params.b
    if params.lam is not None:
        if skip is None:
            raise ConfigurationError("layer has a residual matrix but no skip input was given")
        a = a + np.asarray(skip, dtype=np.float64) @ params.lam.T
    return a


def forward_step(prev: LayerState, params: LayerParams, x, dt: float, alpha: float,
                 skip=None) -> LayerState:
    """One symplectic Euler step: z from the old y, then y from the new z."""
    if prev.y.shape[-1] != params.m:
        raise ConfigurationError(f"state width {prev.y.shape[-1]} != layer width {params.m}")
    h = params.effective_step(dt)
    a = _step_pre(params, prev.y, x, skip)
    z = prev.z - h * (np.tanh(a) + alpha * prev.y)
    y = prev.y + h * z
    return LayerState(y, z)


def inverse_step(nxt: LayerState, params: LayerParams, x, dt: float, alpha: float,
                 skip=None) -> LayerState:
    """Exact inverse of :func:`forward_step`: y first, then z."""
    if nxt.y.shape[-1] != params.m:
        raise ConfigurationError(f"state width {nxt.y.shape[-1]} != layer width {params.m}")
    h = params.effective_step(dt)
    y = nxt.y - h * nxt.z
    a = _step_pre(params, y, x, skip)
    z = nxt.z + h * (np.tanh(a) + alpha * y)
    return LayerState(y, z)


class StateMeter:
    """Counts floats held in buffers, tracking the peak.

    ``hold``/``release`` count hidden-state (y, z) buffers of the
    recurrence. ``hold_inputs`` counts sequence buffers that feed a layer
    (the raw input, a lower layer's output sequence, the input transform);
    those are kept by design and grow with N.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.input_current = 0
        self.input_peak = 0

    def hold(self, *arrays):
        self.current += sum(int(a.size) for a in arrays)
        self.peak = max(self.peak, self.current)

    def release(self, *arrays):
        self.current -= sum(int(a.size) for a in arrays)

    def hold_inputs(self, *arrays):
        self.input_current += sum(int(a.size) for a in arrays)
        self.input_peak = max(self.input_peak, self.input_current)


def layer_forward(initial: LayerState, inputs, params: LayerParams, dt: float, alpha: float,
                  store: bool = False, skip=None, ax=None,
                  meter: Optional[StateMeter] = None):
    """Run one layer over a whole sequence.

    Returns ``(final, outputs, trajectory)``. ``outputs`` is y_1..y_N with
    shape ``(N, m)`` or ``(N, B, m)``. ``trajectory`` is None unless
    ``store`` is set; without it only the outputs and the final state are
    kept. ``ax`` may pass an already computed input transform.
    """
    if ax is None:
        ax = input_transform(params, inputs, skip)
    N, B, m = ax.shape
    if N < 1:
        raise ConfigurationError("sequence must have at least one step")
    y, z, squeeze = _batched_state(initial, m)
    if y.shape[0] != B:
        raise ConfigurationError(f"state batch {y.shape[0]} != input batch {B}")
    h = params.effective_step(dt)
    ys = np.empty((N + 1, B, m)) if store else np.empty((N, B, m))
    zs = np.empty((N + 1, B, m)) if store else np.empty((1, 1, 1))
    if meter is not None:
        meter.hold(y, z)
        if store:
            meter.hold(ys, zs)
        else:
            meter.hold_inputs(ys)
    if store:
        ys[0] = y
        zs[0] = z
        _kernels.forward(ax, params.w, h, float(alpha), y, z, ys[1:], zs[1:], True)
        outputs = ys[1:]
    else:
        _kernels.forward(ax, params.w, h, float(alpha), y, z, ys, zs, False)
        outputs = ys
    traj = None
    if store:
        x = _batched_seq(inputs, params.d_in)
        s = None if skip is None else _batched_seq(skip, m, "skip inputs")
        traj = Trajectory(ys, zs, x, s)
        if squeeze:
            traj = Trajectory(ys[:, 0], zs[:, 0], x[:, 0], None if s is None else s[:, 0])
    if squeeze:
        return LayerState(y[0], z[0]), outputs[:, 0], traj
    return LayerState(y, z), outputs, traj


def hamiltonian(state: LayerState, params: LayerParams, x, alpha: float, skip=None):
    """Energy (alpha/2)|y|^2 + |z|^2/2 + sum_i log cosh(w_i y_i + (Vx)_i + b_i) / w_i.

    Only defined when every w_i is non-zero. Summed over the neuron axis;
    batched states give one value per batch element.
    """
    zero = np.flatnonzero(params.w == 0.0)
    if zero.size:
        raise ValueError(f"hamiltonian undefined: w[{int(zero[0])}] == 0")
    a = _step_pre(params, state.y, x, skip)
    # log cosh(a) = |a| + log1p(exp(-2|a|)) - log 2, stable for large |a|
    aa = np.abs(a)
    logcosh = aa + np.log1p(np.exp(-2.0 * aa)) - np.log(2.0)
    return (0.5 * alpha * np.sum(state.y ** 2, axis=-1)
            + 0.5 * np.sum(state.z ** 2, axis=-1)
            + np.sum(logcosh / params.w, axis=-1))
