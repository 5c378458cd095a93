"""Run one layer forward, walk it back to the start and compare backward modes.

    python demos/reversible_memory.py
"""
import numpy as np

from unicornn import (LayerState, StateMeter, inverse_step, layer_backward_reconstructing,
                      layer_backward_stored, layer_forward)
from unicornn.checks import random_layer

rng = np.random.default_rng(0)
m, d, dt, alpha = 16, 4, 0.1, 1.0
params = random_layer(rng, m, d)

for N in (100, 1000, 10000):
    x = rng.uniform(-1, 1, (N, d))
    final, ys, traj = layer_forward(LayerState.zeros(m), x, params, dt, alpha, store=True)

    # undo every step from the final state alone
    s = final
    for n in range(N - 1, -1, -1):
        s = inverse_step(s, params, x[n], dt, alpha)
    back = max(np.abs(s.y).max(), np.abs(s.z).max())

    up = rng.standard_normal((N, m))
    meter = StateMeter()
    g_rec = layer_backward_reconstructing(final, x, up, params, dt, alpha, meter=meter)
    g_sto = layer_backward_stored(traj, up, params, dt, alpha)
    rel = max(np.abs(a - b).max() / np.abs(b).max()
              for a, b in zip(g_rec.arrays().values(), g_sto.arrays().values()))
    print(f"N={N:6d}  |state_0 after inversion| {back:.2e}  "
          f"grad rel diff {rel:.2e}  peak hidden floats {meter.peak}")
