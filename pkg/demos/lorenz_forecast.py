"""Train a small stack on Lorenz 96 for both forcings and compare test NRMSE.

Scaled down from the lorenz-f09 / lorenz-f8 presets so it finishes in a
minute or two; pass --full for the preset sizes.

    python demos/lorenz_forecast.py [--full]
"""
import sys

from unicornn import cli

full = "--full" in sys.argv
for preset in ("lorenz-f09", "lorenz-f8"):
    argv = ["train", "--preset", preset, "--out", f"runs/demo-{preset}", "--quiet"]
    if not full:
        argv += ["--epochs", "10", "--set", "task.n_seq=32", "--set", "task.seq_len=500"]
    print(preset)
    cli.main(argv)
