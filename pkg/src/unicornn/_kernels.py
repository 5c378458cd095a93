"""Recurrence sweeps over all lanes at once.

Every (batch element, neuron) pair is an independent lane: the only
sequential dependency is along time. The input transform ``ax`` (V x + b,
plus the residual branch when present) is computed for the whole sequence
beforehand, so each time step is a handful of elementwise operations on a
row of B*m lanes, which numpy runs with its vectorized tanh.

Lanes can also be split across threads
(:func:`set_num_threads`); shards never share a lane, so the result does
not depend on the thread count.

Array layout is time-major: ``ax[n, b, i]``.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

# reconstructed states beyond this magnitude mean the inverse sweep has drifted
DRIFT_LIMIT = 1e6

_threads = 1


def set_num_threads(n: int):
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


def _flat(a, lead):
    """View of a C-contiguous array with the trailing (B, m) axes merged into lanes."""
    if not a.flags.c_contiguous:
        raise ValueError("kernel buffers must be C-contiguous")
    return a.reshape(a.shape[:lead] + (-1,))


def _run(fn, n_lanes, arrays_by_axis):
    """Call ``fn`` on contiguous lane shards.

    ``arrays_by_axis`` lists (array, lane_axis) pairs with lane_axis 0, 1
    or None (passed whole).
    """
    k = min(_threads, n_lanes)
    bounds = np.linspace(0, n_lanes, k + 1).astype(int)
    shards = [slice(bounds[j], bounds[j + 1]) for j in range(k)]

    def call(s):
        args = [a if ax is None else (a[s] if ax == 0 else a[:, s]) for a, ax in arrays_by_axis]
        return fn(*args)

    if len(shards) == 1:
        return [call(shards[0])]
    with ThreadPoolExecutor(len(shards)) as ex:
        return list(ex.map(call, shards))


def _lanes(w, h, B):
    return np.tile(w, B), np.tile(h, B)


def _forward(ax, w, h, alpha, y, z, ys, zs, store):
    a = np.empty_like(y)
    tmp = np.empty_like(y)
    for n in range(ax.shape[0]):
        np.multiply(w, y, out=a)
        a += ax[n]
        np.tanh(a, out=a)
        np.multiply(alpha, y, out=tmp)
        a += tmp
        a *= h
        z -= a
        np.multiply(h, z, out=tmp)
        y += tmp
        ys[n] = y
        if store:
            zs[n] = z


def forward(ax, w, h, alpha, y, z, ys, zs, store):
    """Advance ``y``/``z`` in place over all N steps, writing y_n into ``ys``.

    z_n = z_{n-1} - h (tanh(w y_{n-1} + ax_n) + alpha y_{n-1}); y_n = y_{n-1} + h z_n.
    When ``store`` is true ``zs`` receives z_n as well.
    """
    N, B, m = ax.shape
    wl, hl = _lanes(w, h, B)
    zs_flat = _flat(zs, 1) if store else np.empty((N, B * m))
    _run(lambda *r: _forward(*r, store), B * m,
         [(_flat(ax, 1), 1), (wl, 0), (hl, 0), (alpha, None), (_flat(y, 0), 0),
          (_flat(z, 0), 0), (_flat(ys, 1), 1), (zs_flat, 1)])


def _adjoint_step(gy, gz, acc_w, acc_h, up, yp, zn, axn, w, h, alpha, t, tmp):
    """One step of the adjoint sweep, in place; returns the pre-activation adjoint.

    Leaves tanh(w y_{n-1} + ax_n) in ``t``.
    """
    gy += up
    np.multiply(gy, zn, out=tmp)
    acc_h += tmp
    np.multiply(h, gy, out=tmp)
    gz += tmp
    np.multiply(w, yp, out=t)
    t += axn
    np.tanh(t, out=t)
    np.multiply(alpha, yp, out=tmp)
    tmp += t
    tmp *= gz
    acc_h -= tmp
    gf = h * gz
    np.negative(gf, out=gf)
    ga = t * t
    np.subtract(1.0, ga, out=ga)
    ga *= gf
    gf *= alpha
    gy += gf
    np.multiply(ga, w, out=tmp)
    gy += tmp
    np.multiply(ga, yp, out=tmp)
    acc_w += tmp
    return ga


def _backward_stored(ax, w, h, alpha, ys, zs, gy_up, dA, gw, gh, gy0, gz0):
    gy = np.zeros_like(gw)
    gz = np.zeros_like(gw)
    acc_w = np.zeros_like(gw)
    acc_h = np.zeros_like(gw)
    t = np.empty_like(gw)
    tmp = np.empty_like(gw)
    for n in range(ax.shape[0], 0, -1):
        dA[n - 1] = _adjoint_step(gy, gz, acc_w, acc_h, gy_up[n - 1], ys[n - 1], zs[n],
                                  ax[n - 1], w, h, alpha, t, tmp)
    gy0[...] = gy
    gz0[...] = gz
    gw[...] = acc_w
    gh[...] = acc_h


def backward_stored(ax, w, h, alpha, ys, zs, gy_up, dA, gw, gh, gy0, gz0):
    """Adjoint sweep using a stored trajectory.

    ``ys``/``zs`` hold y_0..y_N (shape N+1). ``gy_up[n-1]`` is dE/dy_n.
    Writes the pre-activation adjoint into ``dA`` and per-lane partial sums
    for w and the effective step into ``gw``/``gh``.
    """
    N, B, m = ax.shape
    wl, hl = _lanes(w, h, B)
    _run(_backward_stored, B * m,
         [(_flat(ax, 1), 1), (wl, 0), (hl, 0), (alpha, None), (_flat(ys, 1), 1),
          (_flat(zs, 1), 1), (_flat(gy_up, 1), 1), (_flat(dA, 1), 1), (_flat(gw, 0), 0),
          (_flat(gh, 0), 0), (_flat(gy0, 0), 0), (_flat(gz0, 0), 0)])


def _backward_reconstructing(ax, w, h, alpha, y, z, gy_up, dA, gw, gh, gy0, gz0):
    gy = np.zeros_like(gw)
    gz = np.zeros_like(gw)
    acc_w = np.zeros_like(gw)
    acc_h = np.zeros_like(gw)
    t = np.empty_like(gw)
    tmp = np.empty_like(gw)
    yn = y.copy()
    zn = z.copy()
    yp = np.empty_like(gw)
    for n in range(ax.shape[0], 0, -1):
        # inverse: y first, then z (zn still holds z_n for the adjoint)
        np.multiply(h, zn, out=tmp)
        np.subtract(yn, tmp, out=yp)
        dA[n - 1] = _adjoint_step(gy, gz, acc_w, acc_h, gy_up[n - 1], yp, zn, ax[n - 1],
                                  w, h, alpha, t, tmp)
        np.multiply(alpha, yp, out=tmp)
        tmp += t
        tmp *= h
        zn += tmp
        yn, yp = yp, yn
        if np.abs(yn).max() > DRIFT_LIMIT or np.abs(zn).max() > DRIFT_LIMIT:
            return False
    y[...] = yn
    z[...] = zn
    gy0[...] = gy
    gz0[...] = gz
    gw[...] = acc_w
    gh[...] = acc_h
    return True


def backward_reconstructing(ax, w, h, alpha, y, z, gy_up, dA, gw, gh, gy0, gz0):
    """Adjoint sweep that rebuilds states with the exact inverse step.

    ``y``/``z`` enter holding (y_N, z_N) and leave holding the reconstructed
    (y_0, z_0); only the current state is kept. Returns False if any lane
    drifted past ``DRIFT_LIMIT``.
    """
    N, B, m = ax.shape
    wl, hl = _lanes(w, h, B)
    res = _run(_backward_reconstructing, B * m,
               [(_flat(ax, 1), 1), (wl, 0), (hl, 0), (alpha, None), (_flat(y, 0), 0),
                (_flat(z, 0), 0), (_flat(gy_up, 1), 1), (_flat(dA, 1), 1), (_flat(gw, 0), 0),
                (_flat(gh, 0), 0), (_flat(gy0, 0), 0), (_flat(gz0, 0), 0)])
    return all(res)
