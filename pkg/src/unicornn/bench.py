"""Timing of the combined forward and backward pass.

The fused path is the library's normal training path: the input transform
is computed for the whole sequence in one matrix product, and the
recurrence runs as elementwise sweeps over all lanes. The reference path
is a plain step-by-step implementation: matrix products inside the time
loop and every hidden state stored for the backward pass. Both compute
the same loss and gradients, which the tests use as a cross-check.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, ModelConfig, sigma_hat, sigma_hat_prime
from .model import Model, mse_loss
from .train import init_params, loss_and_grads

BENCH_COLUMNS = ("impl", "N", "m", "L", "batch", "repeat", "seconds")


def naive_loss_and_grads(model: Model, inputs, targets):
    """MSE loss and parameter gradients, computed one time step at a time.

    Supports the plain stack only (sequence readout, no residual branch,
    no dropout).
    """
    cfg = model.config
    if cfg.readout != "sequence" or cfg.skip is not None:
        raise ConfigurationError("the reference path supports sequence readout without residuals")
    x = np.asarray(inputs, dtype=np.float64)
    N, B, _ = x.shape
    alpha = cfg.alpha
    seqs = [x]
    trajs = []
    for l, p in enumerate(model.layers):
        h = cfg.dt[l] * sigma_hat(p.c)
        y = np.zeros((B, cfg.m))
        z = np.zeros((B, cfg.m))
        ys, zs = [y], [z]
        for n in range(N):
            a = seqs[-1][n] @ p.V.T + p.b
            z = z - h * (np.tanh(p.w * y + a) + alpha * y)
            y = y + h * z
            ys.append(y)
            zs.append(z)
        trajs.append((ys, zs))
        seqs.append(np.array(ys[1:]))
    top = seqs[-1]
    out = np.array([top[n] @ model.readout_W.T + model.readout_b for n in range(N)])
    value, g_out = mse_loss(out, targets)

    grads = {"readout.W": np.zeros_like(model.readout_W),
             "readout.b": np.zeros_like(model.readout_b)}
    up = np.empty((N, B, cfg.m))
    for n in range(N):
        grads["readout.W"] += g_out[n].T @ top[n]
        grads["readout.b"] += g_out[n].sum(axis=0)
        up[n] = g_out[n] @ model.readout_W
    for l in range(cfg.L - 1, -1, -1):
        p = model.layers[l]
        h = cfg.dt[l] * sigma_hat(p.c)
        ys, zs = trajs[l]
        xin = seqs[l]
        gV = np.zeros_like(p.V)
        gb = np.zeros(cfg.m)
        gw = np.zeros(cfg.m)
        gh = np.zeros(cfg.m)
        gy = np.zeros((B, cfg.m))
        gz = np.zeros((B, cfg.m))
        gx = np.empty_like(xin)
        for n in range(N, 0, -1):
            yp = ys[n - 1]
            gy = gy + up[n - 1]
            gh += np.sum(gy * zs[n], axis=0)
            gz = gz + h * gy
            t = np.tanh(p.w * yp + xin[n - 1] @ p.V.T + p.b)
            gh -= np.sum(gz * (t + alpha * yp), axis=0)
            gf = -h * gz
            ga = gf * (1.0 - t * t)
            gy = gy + alpha * gf + ga * p.w
            gw += np.sum(ga * yp, axis=0)
            gV += ga.T @ xin[n - 1]
            gb += ga.sum(axis=0)
            gx[n - 1] = ga @ p.V
        grads[f"layers.{l}.w"] = gw
        grads[f"layers.{l}.V"] = gV
        grads[f"layers.{l}.b"] = gb
        grads[f"layers.{l}.c"] = gh * cfg.dt[l] * sigma_hat_prime(p.c)
        up = gx
    return value, grads


def fused_loss_and_grads(model: Model, inputs, targets):
    return loss_and_grads(model, inputs, targets, "mse")


@dataclass
class BenchResult:
    rows: list

    def mean(self, impl: str) -> float:
        return float(np.mean([r["seconds"] for r in self.rows if r["impl"] == impl]))


def run_bench(N: int, m: int, L: int, batch: int, repeats: int = 20, d: int = 1,
              seed: int = 0, impls=("fused", "naive")) -> BenchResult:
    """Time ``repeats`` forward+backward passes of each implementation.

    Every repeat uses a fresh random batch; the two implementations see the
    same batches in alternating order.
    """
    if min(N, m, L, batch, repeats, d) < 1:
        raise ConfigurationError("bench sizes must be positive")
    fns = {"fused": fused_loss_and_grads, "naive": naive_loss_and_grads}
    unknown = set(impls) - set(fns)
    if unknown:
        raise ConfigurationError(f"unknown implementation {sorted(unknown)}")
    model = init_params(ModelConfig(L=L, m=m, d=d, dt=0.05, out_dim=1), seed)
    rng = np.random.default_rng(seed)
    rows = []
    for r in range(repeats):
        x = rng.uniform(-1.0, 1.0, size=(N, batch, d))
        t = rng.uniform(-1.0, 1.0, size=(N, batch, 1))
        order = impls if r % 2 == 0 else tuple(reversed(impls))
        for impl in order:
            t0 = time.perf_counter()
            fns[impl](model, x, t)
            rows.append({"impl": impl, "N": N, "m": m, "L": L, "batch": batch, "repeat": r,
                         "seconds": time.perf_counter() - t0})
    rows.sort(key=lambda row: (impls.index(row["impl"]), row["repeat"]))
    return BenchResult(rows)


def write_bench_csv(result: BenchResult, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        wr.writeheader()
        for r in result.rows:
            wr.writerow({**r, "seconds": format(r["seconds"], ".6g")})
