"""Self-contained verification checks on random instances.

Each check returns :class:`CheckRecord` rows (suite, name, measured value,
threshold, pass flag). The CLI ``verify`` command prints them; the
acceptance tests run the same checks at full size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analysis, train
from .backward import layer_backward_reconstructing, layer_backward_stored, model_backward
from .core import LayerParams, LayerState, ModelConfig, StateMeter, forward_step, \
    inverse_step, layer_forward
from .model import DropoutMask, Model, model_forward


@dataclass
class CheckRecord:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.suite:<15} {self.name:<40} {self.value:<12.4g} {self.threshold:<10.4g} {self.detail}"


def _rec(suite, name, value, threshold, passed, detail=""):
    return CheckRecord(suite, name, float(value), float(threshold), bool(passed), detail)


def random_layer(rng, m, d, lam=False, scale=1.0) -> LayerParams:
    return LayerParams(rng.uniform(0.0, 1.0, m), scale * rng.uniform(-1.0, 1.0, (m, d)),
                       rng.uniform(-0.5, 0.5, m), rng.uniform(-1.0, 1.0, m),
                       rng.uniform(-0.5, 0.5, (m, m)) if lam else None)


def random_model(rng, cfg: ModelConfig) -> Model:
    """O(1) random weights (init_params scales V down, which hides errors)."""
    layers = [random_layer(rng, cfg.m, cfg.layer_input_dim(l), cfg.has_skip(l))
              for l in range(cfg.L)]
    return Model(cfg, layers, rng.uniform(-1.0, 1.0, (cfg.out_dim, cfg.m)),
                 rng.uniform(-0.5, 0.5, cfg.out_dim))


# ---------------------------------------------------------------- checks

def check_inversion(seed=0, N=1000, m=16, d=4, dt=0.1, alpha=1.0):
    rng = np.random.default_rng(seed)
    p = random_layer(rng, m, d)
    x = rng.uniform(-1.0, 1.0, (N, d))
    s = LayerState(rng.uniform(-1.0, 1.0, m), rng.uniform(-1.0, 1.0, m))
    one = inverse_step(forward_step(s, p, x[0], dt, alpha), p, x[0], dt, alpha)
    err1 = max(np.max(np.abs(one.y - s.y)), np.max(np.abs(one.z - s.z)))

    final, _, traj = layer_forward(LayerState.zeros(m), x, p, dt, alpha, store=True)
    cur = final
    worst = 0.0
    for n in range(N, 0, -1):
        cur = inverse_step(cur, p, x[n - 1], dt, alpha)
        worst = max(worst, np.max(np.abs(cur.y - traj.y[n - 1])), np.max(np.abs(cur.z - traj.z[n - 1])))

    up = rng.standard_normal((N, m))
    gs = layer_backward_stored(traj, up, p, dt, alpha)
    gr = layer_backward_reconstructing(final, x, up, p, dt, alpha)
    rel = max(analysis.relative_error(gr.arrays()[k], v) for k, v in gs.arrays().items())
    rel = max(rel, analysis.relative_error(gr.x, gs.x))
    return [
        _rec("inversion", "single step round trip (max abs)", err1, 1e-12, err1 < 1e-12),
        _rec("inversion", f"N={N} reconstruction (max abs)", worst, 1e-9, worst < 1e-9),
        _rec("inversion", "reconstructing vs stored grads (rel)", rel, 1e-7, rel < 1e-7),
    ]


def check_memory(seed=0, lengths=(100, 1000), L=2, m=8, d=3, batch=4):
    peaks = []
    for N in lengths:
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(L=L, m=m, d=d, dt=0.1, out_dim=2)
        model = random_model(rng, cfg)
        meter = StateMeter()
        out, cache = model_forward(model, rng.uniform(-1, 1, (N, batch, d)), meter=meter)
        model_backward(model, cache, rng.standard_normal((N, batch, m)))
        peaks.append(meter.peak)
    same = len(set(peaks)) == 1
    return [_rec("memory", f"peak hidden floats N={lengths}", peaks[-1], peaks[0], same,
                 f"peaks={peaks}")]


def check_volume(seed=0, draws=10_000, chain_steps=100):
    rng = np.random.default_rng(seed)
    p = LayerParams(rng.uniform(-2.0, 2.0, draws), rng.uniform(-2.0, 2.0, (draws, 1)),
                    rng.uniform(-2.0, 2.0, draws), rng.uniform(-3.0, 3.0, draws))
    st = LayerState(rng.uniform(-2.0, 2.0, draws), rng.uniform(-2.0, 2.0, draws))
    dt = rng.uniform(0.001, 0.999)
    B = analysis.step_jacobian(p, st, rng.uniform(-1, 1, 1), dt, rng.uniform(0.0, 10.0))
    det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    e1 = float(np.max(np.abs(det - 1.0)))

    m, d = 8, 3
    q = random_layer(rng, m, d)
    x = rng.uniform(-1.0, 1.0, (chain_steps, d))
    _, _, traj = layer_forward(LayerState(rng.uniform(-1, 1, m), rng.uniform(-1, 1, m)),
                               x, q, 0.1, 1.0, store=True)
    J = analysis.jacobian_chain(q, traj, 0, chain_steps, 0.1, 1.0)
    e2 = abs(float(np.linalg.det(J)) - 1.0)
    return [
        _rec("volume", f"{draws} step blocks |det-1|", e1, 1e-12, e1 < 1e-12),
        _rec("volume", f"{chain_steps}-step chain |det-1|", e2, 1e-8, e2 < 1e-8),
    ]


def check_state_bounds(seeds=range(10), N=10_000, L=3, m=16, d=4, batch=4, dt=0.01, alpha=1.0):
    worst = np.inf
    ok = True
    for seed in seeds:
        cfg = ModelConfig(L=L, m=m, d=d, dt=dt, alpha=alpha)
        model = train.init_params(cfg, seed)
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, (N, batch, d))
        trajs = []
        for prm in model.layers:
            _, x, tr = layer_forward(LayerState.zeros(m, batch), x, prm, dt, alpha, store=True)
            trajs.append(tr)
        rep = analysis.state_bound_check(trajs, alpha, dt)
        worst = min(worst, rep.min_margin_y, rep.min_margin_z)
        ok = ok and rep.holds
    return [_rec("state-bounds", f"min margin over {len(list(seeds))} seeds, N={N}", worst, 0.0, ok)]


def check_grad_bound(n_configs=10, seed=0, N=100, m=8, d=3, dt=0.01):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_configs):
        L = 1 + i % 2
        alpha = float(rng.uniform(0.5, 2.0))
        cfg = ModelConfig(L=L, m=m, d=d, dt=dt, alpha=alpha, out_dim=m)
        model = train.init_params(cfg, int(rng.integers(1 << 31)))
        model.readout_W[:] = np.eye(m)
        model.readout_b[:] = 0.0
        u = rng.uniform(-1.0, 1.0, (N, 1, d))
        ybar = rng.uniform(-1.0, 1.0, (N, 1, m))
        _, grads = train.loss_and_grads(model, u, ybar, "mse")
        grads = {k: g for k, g in grads.items() if k.startswith("layers.")}
        rep = analysis.gradient_bound(model, float(np.max(np.abs(ybar))), N, grads)
        rows.append(_rec("grad-bound", f"config {i} (L={L}, alpha={alpha:.2f}) max|dE/dtheta|",
                         rep.observed_max_grad, rep.bound, rep.satisfied))
    return rows


def fd_instance(rng, i):
    """Random model plus data for gradient checking; cycles through loss and depth options."""
    L = 1 + i % 3
    residual = L == 3 and (i // 3) % 2 == 1
    loss = "xent" if i % 2 else "mse"
    m = int(rng.integers(2, 9))
    d = int(rng.integers(1, 5))
    N = int(rng.integers(5, 26))
    B = 2
    dropout = 0.3 if (L > 1 and i % 4 == 1) else 0.0
    out_dim = int(rng.integers(2, 5))
    cfg = ModelConfig(L=L, m=m, d=d, dt=list(rng.uniform(0.4, 0.9, L)),
                      alpha=float(rng.uniform(0.0, 2.0)), skip=2 if residual else None,
                      dropout=dropout, out_dim=out_dim,
                      readout="final" if loss == "xent" else "sequence")
    model = random_model(rng, cfg)
    u = rng.uniform(-1.0, 1.0, (N, B, d))
    if loss == "xent":
        t = rng.integers(0, out_dim, size=B)
    else:
        t = rng.uniform(-1.0, 1.0, (N, B, out_dim))
    mask = DropoutMask.sample(cfg, rng, batch=B) if dropout > 0 else None
    return model, u, t, loss, mask


FD_EXTRAPOLATED_STEP = 3e-3


def check_fd(n_instances=20, seed=0, rel_step=FD_EXTRAPOLATED_STEP, extrapolate=True):
    """Analytic gradients against central differences on random instances.

    The default oracle is the extrapolated central difference with a
    3e-3 relative step: plain differences at 1e-5 hit a rounding floor near
    1e-12 absolute, which exceeds the 1e-6 relative target for the small
    lower-layer gradients of deep stacks.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        model, u, t, loss, mask = fd_instance(rng, i)
        _, grads = train.loss_and_grads(model, u, t, loss, mask=mask)
        num = analysis.finite_difference_gradients(
            lambda mdl: train.loss_and_grads(mdl, u, t, loss, mask=mask)[0], model,
            rel_step=rel_step, extrapolate=extrapolate)
        worst, where = 0.0, ""
        for k, g in num.items():
            e = analysis.relative_error(grads[k], g)
            if e > worst:
                worst, where = e, k
        cfg = model.config
        rows.append(_rec("fd-match", f"instance {i} (L={cfg.L}, {loss}, skip={cfg.skip})",
                         worst, 1e-6, worst < 1e-6, where))
    return rows


def check_vanishing(seeds=range(3), n=8, k=2, profile_n=100, profile_dt=0.1, k_max=75):
    rows = []
    for s in seeds:
        rep = analysis.vanishing_gradient_probe(analysis.ProbeInstance.random(seed=s, n=n), k, n)
        rows.append(_rec("vanishing-probe", f"remainder order, seed {s} (target 2)",
                         rep.order, 0.3, rep.passed))
    prof = analysis.k_profile(analysis.ProbeInstance.slow_drift(n=profile_n), profile_dt,
                              profile_n, range(1, k_max + 1))
    ratio = float(prof.max() / prof.min())
    rows.append(_rec("vanishing-probe", f"k-profile max/min, n={profile_n}", ratio, 100.0,
                     ratio <= 100.0))
    return rows


def scaling_model_factory(L, S, seed=0, m=4, d=2):
    def make(dt):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(L=L, m=m, d=d, dt=dt, alpha=1.0, skip=S)
        return random_model(rng, cfg)
    return make


def run_scaling(L, S, seed=0, dt_list=(0.2, 0.1, 0.05, 0.025), horizon=1.0, m=4, d=2):
    rng = np.random.default_rng(seed + 1000)
    n_max = int(round(horizon / min(dt_list)))
    return analysis.multilayer_scaling_probe(
        scaling_model_factory(L, S, seed, m, d), dt_list, lambda dt: int(round(horizon / dt)),
        inputs=rng.uniform(-1.0, 1.0, (n_max, d)), y0=rng.uniform(-1.0, 1.0, m),
        target=rng.uniform(-1.0, 1.0, m))


def check_scaling(seed=0):
    rows = []
    for L, S in ((3, None), (7, 3)):
        rep = run_scaling(L, S, seed)
        label = f"L={L}" + (f", S={S} (nu={rep.extra['nu']})" if S else " fully connected")
        rows.append(_rec("scaling-probe", f"{label}: exponent vs {rep.expected:g}",
                         rep.order, 0.5, rep.passed))
    return rows


SUITES = {
    "inversion": check_inversion,
    "memory": check_memory,
    "volume": check_volume,
    "state-bounds": check_state_bounds,
    "grad-bound": check_grad_bound,
    "fd-match": check_fd,
    "vanishing-probe": check_vanishing,
    "scaling-probe": check_scaling,
}


def run_suite(name: str) -> list:
    if name == "all":
        rows = []
        for fn in SUITES.values():
            rows.extend(fn())
        return rows
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
