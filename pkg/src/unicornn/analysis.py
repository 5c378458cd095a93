"""Numerical checks of the stability theory: bounds, Jacobians, gradient scaling.

State vectors of one layer are interleaved as [y_1, z_1, y_2, z_2, ...]
so each neuron owns a contiguous 2x2 diagonal block of the step Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    LayerParams,
    LayerState,
    NumericalStabilityError,
    Trajectory,
    input_transform,
    layer_forward,
    sigma_hat,
)


# ---------------------------------------------------------------- bounds

@dataclass
class BoundReport:
    gamma: float
    beta: float
    F: float
    Delta: float
    Vbar: float
    Ybar: float
    T: float
    bound: float
    observed_max_grad: Optional[float] = None
    satisfied: Optional[bool] = None


def beta_constant(alpha: float) -> float:
    return max(1.0 + 2.0 * alpha, 4.0 * alpha * alpha)


def gradient_bound(model, Ybar: float, N: int, grads: Optional[dict] = None) -> BoundReport:
    """Upper bound on |dE/dtheta| for the per-step MSE on the top layer's states.

    The loss is E = (1/N) sum_n |y^L_n - ybar_n|^2 / 2 with |ybar| <= Ybar.
    With several layer steps the largest is used. When ``grads`` (a dict of
    arrays) is given, the report also carries the observed maximum and
    whether it respects the bound.
    """
    cfg = model.config
    alpha = float(cfg.alpha)
    if alpha <= 0.0:
        raise ValueError("gradient bound needs alpha > 0 (F is undefined at alpha = 0)")
    dt = max(cfg.dt)
    if dt >= 1.0:
        raise ValueError("gradient bound needs dt < 1")
    T = N * dt
    wL = float(np.max(np.abs(model.layers[-1].w)))
    g0 = max(2.0, wL + alpha)
    gamma = g0 + 0.5 * g0 * g0
    beta = beta_constant(alpha)
    Vbar = 1.0
    for p in model.layers:
        Vbar *= max(1.0, float(np.max(np.sum(np.abs(p.V), axis=1))))
    growth = 1.0 + 2.0 * beta * T
    F = np.sqrt((2.0 / alpha) * growth)
    Delta = 2.0 + np.sqrt(growth) + (2.0 + alpha) * F
    geom = (1.0 - dt ** cfg.L) / (1.0 - dt)
    bound = geom * T * (1.0 + 2.0 * gamma * T) * Vbar * (Ybar + F) * Delta
    rep = BoundReport(gamma, beta, float(F), float(Delta), Vbar, float(Ybar), T, float(bound))
    if grads is not None:
        obs = max(float(np.max(np.abs(g))) for g in grads.values())
        rep.observed_max_grad = obs
        rep.satisfied = obs <= bound
    return rep


@dataclass
class StateBoundReport:
    min_margin_y: float
    min_margin_z: float
    worst_layer: int
    worst_step: int
    holds: bool
    per_layer: list = field(default_factory=list)


def state_bound_check(trajectories: Sequence[Trajectory], alpha: float, dt,
                      beta: Optional[float] = None) -> StateBoundReport:
    """Check |y| <= sqrt((2/alpha)(1+2 beta t_n)) and |z| <= sqrt(2(1+2 beta t_n)).

    ``trajectories`` holds one stored trajectory per layer; ``dt`` is a
    scalar or one value per layer, and t_n = n * dt. Margins are
    bound minus observed maximum over neurons (and batch).
    """
    if alpha <= 0.0:
        raise ValueError("state bounds need alpha > 0")
    beta = beta_constant(alpha) if beta is None else beta
    dts = np.broadcast_to(np.asarray(dt, dtype=float), (len(trajectories),))
    per_layer = []
    worst = (np.inf, -1, -1)
    for l, (tr, h) in enumerate(zip(trajectories, dts)):
        y = np.abs(tr.y).reshape(tr.y.shape[0], -1).max(axis=1)
        z = np.abs(tr.z).reshape(tr.z.shape[0], -1).max(axis=1)
        g = 1.0 + 2.0 * beta * np.arange(y.shape[0]) * h
        my = np.sqrt(2.0 / alpha * g) - y
        mz = np.sqrt(2.0 * g) - z
        per_layer.append((float(my.min()), float(mz.min())))
        both = np.minimum(my, mz)
        n = int(np.argmin(both))
        if both[n] < worst[0]:
            worst = (float(both[n]), l, n)
    my_min = min(v[0] for v in per_layer)
    mz_min = min(v[1] for v in per_layer)
    return StateBoundReport(my_min, mz_min, worst[1], worst[2],
                            my_min >= 0.0 and mz_min >= 0.0, per_layer)


# ------------------------------------------------------------- Jacobians

def step_jacobian(params: LayerParams, state: LayerState, x, dt: float, alpha: float,
                  skip=None) -> np.ndarray:
    """Per-neuron blocks d(y_n, z_n)/d(y_{n-1}, z_{n-1}), shape ``(m, 2, 2)``.

    Block [[1 - h^2 k, h], [-h k, 1]] with h the effective step and
    k = w * tanh'(A) + alpha; its determinant is exactly 1.
    """
    h = params.effective_step(dt)
    x = np.asarray(x, dtype=np.float64)
    a = params.w * state.y + x @ params.V.T + params.b
    if params.lam is not None:
        a = a + np.asarray(skip, dtype=np.float64) @ params.lam.T
    t = np.tanh(a)
    k = params.w * (1.0 - t * t) + alpha
    out = np.empty((params.m, 2, 2))
    out[:, 0, 0] = 1.0 - h * h * k
    out[:, 0, 1] = h
    out[:, 1, 0] = -h * k
    out[:, 1, 1] = 1.0
    return out


def block_matrix(blocks: np.ndarray) -> np.ndarray:
    """Dense 2m x 2m matrix from ``(m, 2, 2)`` blocks in interleaved ordering."""
    m = blocks.shape[0]
    out = np.zeros((2 * m, 2 * m))
    for i in range(m):
        out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = blocks[i]
    return out


def jacobian_chain(params: LayerParams, traj: Trajectory, k: int, n: int, dt: float,
                   alpha: float) -> np.ndarray:
    """dX_n/dX_k as a dense 2m x 2m matrix for an unbatched stored trajectory."""
    if traj.y.ndim != 2:
        raise ConfigurationError("jacobian_chain expects an unbatched trajectory")
    if not 0 <= k < n <= len(traj):
        raise IndexError(f"need 0 <= k < n <= {len(traj)}, got k={k}, n={n}")
    return block_matrix(_chain_blocks(params, traj, k, n, dt, alpha))


def _chain_blocks(params, traj, k, n, dt, alpha):
    blocks = np.tile(np.eye(2), (params.m, 1, 1))
    for j in range(k + 1, n + 1):
        s = None if traj.skip_inputs is None else traj.skip_inputs[j - 1]
        J = step_jacobian(params, traj.state(j - 1), traj.inputs[j - 1], dt, alpha, s)
        blocks = J @ blocks
    return blocks


def direct_w_derivative(params: LayerParams, traj: Trajectory, k: int, dt: float,
                        p: int) -> np.ndarray:
    """d+X_k/dw_p: derivative of step k w.r.t. w_p with X_{k-1} held fixed.

    Returns the (y, z) pair of neuron p; all other neurons are zero.
    """
    h = params.effective_step(dt)[p]
    ax = input_transform(params, traj.inputs[k - 1][None, :],
                         None if traj.skip_inputs is None else traj.skip_inputs[k - 1][None, :])
    yp = traj.y[k - 1, p]
    t = np.tanh(params.w[p] * yp + ax[0, 0, p])
    dz = -h * (1.0 - t * t) * yp
    return np.array([h * dz, dz])


# ------------------------------------------------------ gradient probes

@dataclass
class ProbeReport:
    dt_list: list
    exact: np.ndarray
    leading: np.ndarray
    remainder: np.ndarray
    order: float
    expected: float
    tolerance: float
    passed: bool
    extra: dict = field(default_factory=dict)


def fit_order(dt_list, values) -> float:
    """Least-squares slope of log|values| against log dt."""
    x = np.log(np.asarray(dt_list, dtype=float))
    y = np.log(np.abs(np.asarray(values, dtype=float)))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ProbeInstance:
    """A single-layer setup for the vanishing-gradient probe.

    ``inputs`` is ``(n, d)``; the initial state and the target for y_n are
    fixed across dt so only the step size varies.
    """

    params: LayerParams
    alpha: float
    inputs: np.ndarray
    y0: np.ndarray
    z0: np.ndarray
    target: np.ndarray

    @classmethod
    def random(cls, m=4, d=2, n=8, seed=0, alpha=1.0):
        """Random weights with positions and targets bounded away from zero.

        |y_0| and |target| lie in [0.5, 1] with opposite signs, so neither
        y_{k-1} nor the error e_n is close to zero at small dt.
        """
        rng = np.random.default_rng(seed)
        p = LayerParams(rng.uniform(0.0, 1.0, m), rng.uniform(-1.0, 1.0, (m, d)),
                        rng.uniform(-0.5, 0.5, m), rng.uniform(-0.1, 0.1, m))
        sign = rng.choice([-1.0, 1.0], m)
        y0 = sign * rng.uniform(0.5, 1.0, m)
        return cls(p, alpha, rng.uniform(-1.0, 1.0, (n, d)), y0, rng.uniform(-1.0, 1.0, m),
                   -sign * rng.uniform(0.5, 1.0, m))

    @classmethod
    def slow_drift(cls, m=4, d=2, n=100, seed=0):
        """Soft, positively forced oscillators whose positions never change sign.

        Small stiffness and a negative bias keep every neuron drifting one
        way over the whole window, so the k-profile is free of the sign
        changes that would make a max/min ratio meaningless.
        """
        rng = np.random.default_rng(seed)
        p = LayerParams(rng.uniform(0.0, 0.02, m), rng.uniform(-0.05, 0.05, (m, d)),
                        np.full(m, -2.0), np.zeros(m))
        return cls(p, 0.01, rng.uniform(-1.0, 1.0, (n, d)), rng.uniform(0.5, 1.0, m),
                   np.zeros(m), np.full(m, -1.0))

    def run(self, dt):
        traj = layer_forward(LayerState(self.y0.copy(), self.z0.copy()), self.inputs,
                             self.params, dt, self.alpha, store=True)[2]
        return traj


def gradient_contribution(inst: ProbeInstance, dt: float, k: int, n: int, p: int = 0,
                          traj: Optional[Trajectory] = None):
    """(exact, leading) for dE_n/dw_p routed through step k of a single layer.

    exact = e_n . dX_n/dX_k . d+X_k/dw_p with E_n = |y_n - target|^2 / 2.
    leading = -dt sigma_hat(c_p)^2 t_n tanh'(A_{k-1}) y_{k-1} e_{n,p}.
    """
    if traj is None:
        traj = inst.run(dt)
    params = inst.params
    blocks = _chain_blocks(params, traj, k, n, dt, inst.alpha)
    e = traj.y[n] - inst.target
    dX = direct_w_derivative(params, traj, k, dt, p)
    exact = e[p] * (blocks[p, 0] @ dX)
    ax = input_transform(params, traj.inputs[k - 1][None, :])
    yk = traj.y[k - 1, p]
    t = np.tanh(params.w[p] * yk + ax[0, 0, p])
    s = float(sigma_hat(params.c[p]))
    leading = -dt * s * s * (n * dt) * (1.0 - t * t) * yk * e[p]
    return float(exact), float(leading)


def vanishing_gradient_probe(inst: ProbeInstance, k: int, n: int,
                             dt_list=(0.1, 0.05, 0.025, 0.0125), p: int = 0,
                             tolerance: float = 0.3) -> ProbeReport:
    """Fit the dt-order of (exact - leading) at fixed step indices k and n.

    With the indices fixed, t_n = n dt shrinks with dt and the correction
    to the leading term is second order in dt. The asymptotic order only
    shows once n * dt is well below the oscillation period, so short
    windows (n around 8) give clean fits.
    """
    if not isinstance(inst, ProbeInstance):
        raise ConfigurationError("the probe takes a single-layer instance; "
                                 "use multilayer_scaling_probe for stacks")
    if not 1 <= k <= n // 4:
        raise ConfigurationError(f"need 1 <= k <= n/4, got k={k}, n={n}")
    if inst.inputs.shape[0] < n:
        raise ConfigurationError(f"instance has {inst.inputs.shape[0]} inputs for n={n}")
    ex, le = [], []
    for dt in dt_list:
        a, b = gradient_contribution(inst, dt, k, n, p)
        ex.append(a)
        le.append(b)
    ex, le = np.array(ex), np.array(le)
    rem = ex - le
    order = fit_order(dt_list, rem)
    return ProbeReport(list(dt_list), ex, le, rem, order, 2.0, tolerance,
                       abs(order - 2.0) <= tolerance)


def k_profile(inst: ProbeInstance, dt: float, n: int, ks, p: int = 0) -> np.ndarray:
    """|exact contribution| for each k in ``ks`` at a fixed dt."""
    traj = inst.run(dt)
    return np.array([abs(gradient_contribution(inst, dt, k, n, p, traj)[0]) for k in ks])


def residual_depth(L: int, S: Optional[int]) -> int:
    """nu: the number of residual hops on the shortest path from layer 1 to L."""
    if S is None:
        return 0
    return (L - 1) // S


def predicted_exponent(L: int, S: Optional[int] = None) -> int:
    if S is None:
        return 2 * L - 1
    nu = residual_depth(L, S)
    return 2 * nu + 2 * L - 2 * nu * S - 1


def _cross_jacobian(model, trajs, n, dt):
    """dX^L_n / dX^1_n through the within-step layer graph, shape (2m, 2m).

    Layer l reads y^{l-1}_n (and the skip source's y_n) at the same step,
    so every hop goes through the y rows of the lower layer.
    """
    cfg = model.config
    m = cfg.m
    D = [None] * cfg.L
    D[0] = np.eye(2 * m)
    yrows = np.arange(0, 2 * m, 2)
    for l in range(1, cfg.L):
        p = model.layers[l]
        h = p.effective_step(dt)
        tr = trajs[l]
        a = p.w * tr.y[n - 1] + input_transform(
            p, tr.inputs[n - 1][None, :],
            None if tr.skip_inputs is None else tr.skip_inputs[n - 1][None, :])[0, 0]
        sp = 1.0 - np.tanh(a) ** 2
        # d(z, y)^l_n / d y_n of an input feeding this layer through matrix M
        def hop(M):
            H = np.zeros((2 * m, 2 * m))
            dz = -(h * sp)[:, None] * M
            H[1::2][:, yrows] = dz
            H[0::2][:, yrows] = h[:, None] * dz
            return H
        acc = hop(p.V) @ D[l - 1]
        if cfg.has_skip(l):
            acc = acc + hop(p.lam) @ D[cfg.skip_source(l)]
        D[l] = acc
    return D[-1]


def multilayer_scaling_probe(model_for_dt: Callable, dt_list, n_of_dt: Callable, k: int = 1,
                             p: int = 0, inputs: Optional[np.ndarray] = None,
                             y0: Optional[np.ndarray] = None, target=None,
                             tolerance: float = 0.5) -> ProbeReport:
    """Fit the dt-exponent of the layer-1 route of dE_n/dw^1_p in a deep stack.

    ``model_for_dt(dt)`` returns a model whose layers all use step dt;
    ``n_of_dt(dt)`` gives the step index n (e.g. a fixed horizon t_n / dt).
    The measured quantity is
    e_n . dX^L_n/dX^1_n . dX^1_n/dX^1_k . d+X^1_k/dw^1_p.
    Layer 1 starts from ``y0`` (others from rest), which keeps the direct
    w-derivative of O(1) size.
    """
    dt_list = list(dt_list)
    if max(dt_list) / min(dt_list) < 8.0:
        raise ConfigurationError("dt_list must span at least three octaves")
    vals = []
    L = S = None
    for dt in dt_list:
        model = model_for_dt(dt)
        cfg = model.config
        L, S = cfg.L, cfg.skip
        if L < 2:
            raise ConfigurationError("scaling probe needs L >= 2")
        n = int(n_of_dt(dt))
        u = inputs[:n] if inputs is not None else np.zeros((n, cfg.d))
        trajs = []
        x = u
        outs = []
        for l, prm in enumerate(model.layers):
            s = outs[cfg.skip_source(l)] if cfg.has_skip(l) else None
            init = LayerState.zeros(cfg.m)
            if l == 0 and y0 is not None:
                init = LayerState(np.asarray(y0, dtype=float).copy(), np.zeros(cfg.m))
            _, ys, tr = layer_forward(init, x, prm, cfg.dt[l], cfg.alpha, store=True, skip=s)
            trajs.append(tr)
            outs.append(ys)
            x = ys
        top = trajs[-1]
        tgt = np.zeros(cfg.m) if target is None else np.asarray(target, dtype=float)
        e = np.zeros(2 * cfg.m)
        e[0::2] = top.y[n] - tgt
        C = _cross_jacobian(model, trajs, n, dt)
        P = block_matrix(_chain_blocks(model.layers[0], trajs[0], k, n, cfg.dt[0], cfg.alpha))
        dX = np.zeros(2 * cfg.m)
        dX[2 * p:2 * p + 2] = direct_w_derivative(model.layers[0], trajs[0], k, cfg.dt[0], p)
        vals.append(float(e @ C @ P @ dX))
    vals = np.array(vals)
    order = fit_order(dt_list, vals)
    expected = predicted_exponent(L, S)
    return ProbeReport(dt_list, vals, np.zeros_like(vals), vals, order, float(expected),
                       tolerance, abs(order - expected) <= tolerance,
                       {"nu": residual_depth(L, S)})


def effective_timesteps(model) -> np.ndarray:
    """``(L, m)`` matrix of dt_l * sigma_hat(c_l)."""
    return np.stack([p.effective_step(dt) for p, dt in zip(model.layers, model.config.dt)])


# ------------------------------------------------------ finite differences

def finite_difference_gradients(loss: Callable, model, rel_step: float = 1e-5,
                                names: Optional[Sequence[str]] = None,
                                extrapolate: bool = False) -> dict:
    """Central differences of ``loss(model)`` for every scalar parameter.

    Each entry is perturbed in place by h = rel_step * max(1, |theta|) and
    restored afterwards. ``names`` restricts the sweep to some parameters.
    With ``extrapolate`` the central differences at h and h/2 are combined
    as (4 D(h/2) - D(h)) / 3, cancelling the h^2 error term; this allows a
    larger h and so a much lower rounding floor for small components.
    """
    params = model.parameters()

    def central(arr, idx, h, name):
        orig = arr[idx]
        arr[idx] = orig + h
        ep = loss(model)
        arr[idx] = orig - h
        em = loss(model)
        arr[idx] = orig
        if not (np.isfinite(ep) and np.isfinite(em)):
            raise NumericalStabilityError(f"non-finite loss while perturbing {name}{list(idx)}")
        return (ep - em) / (2.0 * h)

    out = {}
    for name, arr in params.items():
        if names is not None and name not in names:
            continue
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            h = rel_step * max(1.0, abs(arr[idx]))
            if extrapolate:
                g[idx] = (4.0 * central(arr, idx, 0.5 * h, name) - central(arr, idx, h, name)) / 3.0
            else:
                g[idx] = central(arr, idx, h, name)
        out[name] = g
    return out


def relative_error(analytic, numeric) -> float:
    """max |a - n| / max(|a|, |n|, 1e-12), elementwise."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0
