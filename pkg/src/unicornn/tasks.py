"""Synthetic sequence tasks and the dataset container."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConfigurationError

SPLITS = ("train", "valid", "test")


@dataclass
class SequenceDataset:
    """Equal-length sequences stacked along axis 0.

    ``inputs`` is ``(S, N, d)``. ``targets`` is ``(S, N, k)`` for
    per-step regression or ``(S,)`` integer labels for classification.
    ``split`` tags each sequence with train/valid/test.
    """

    inputs: np.ndarray
    targets: np.ndarray
    split: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        t = np.asarray(self.targets)
        self.targets = t.astype(np.int64) if t.ndim == 1 else t.astype(np.float64)
        if self.split is None:
            self.split = np.full(self.inputs.shape[0], "train")
        self.split = np.asarray(self.split, dtype=object)
        if self.inputs.ndim != 3:
            raise ConfigurationError(f"inputs must be (S, N, d), got shape {self.inputs.shape}")
        S, N, _ = self.inputs.shape
        if self.targets.shape[0] != S or self.split.shape != (S,):
            raise ConfigurationError("inputs, targets and split disagree on the number of sequences")
        if self.targets.ndim == 3 and self.targets.shape[1] != N:
            raise ConfigurationError(f"targets have {self.targets.shape[1]} steps, inputs {N}")
        if self.targets.ndim not in (1, 3):
            raise ConfigurationError("targets must be (S,) labels or (S, N, k) sequences")
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise ConfigurationError(f"unknown split tags {sorted(bad)}")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.inputs.shape[2]

    def subset(self, split: str) -> "SequenceDataset":
        keep = self.split == split
        return SequenceDataset(self.inputs[keep], self.targets[keep], self.split[keep])

    def sizes(self) -> dict:
        return {s: int(np.sum(self.split == s)) for s in SPLITS}


def lorenz96_rhs(x, F):
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F, cyclic in i (last axis)."""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


def rk4_step(x, F, h):
    k1 = lorenz96_rhs(x, F)
    k2 = lorenz96_rhs(x + 0.5 * h * k1, F)
    k3 = lorenz96_rhs(x + 0.5 * h * k2, F)
    k4 = lorenz96_rhs(x + h * k3, F)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_trajectory(x0, F, n_record, step=0.01, stride=1, burn_in=0):
    """Integrate from ``x0`` (``(..., K)``) and record every ``stride`` internal steps.

    Returns ``(n_record, ..., K)`` starting with the state after burn-in.
    """
    x = np.array(x0, dtype=np.float64)
    for _ in range(burn_in):
        x = rk4_step(x, F, step)
    out = np.empty((n_record,) + x.shape)
    out[0] = x
    for n in range(1, n_record):
        for _ in range(stride):
            x = rk4_step(x, F, step)
        out[n] = x
    return out


def lorenz96_generate(F: float, n_seq: int = 128, seq_len: int = 2000, seed=0,
                      step: float = 0.01, stride: int = 1, horizon: int = 1,
                      n_components: int = 5, burn_in: int = 1000) -> SequenceDataset:
    """One-step-ahead (or ``horizon``-ahead) Lorenz 96 prediction data.

    ``n_seq`` sequences per split (train, valid, test). Each starts at
    x_i = F + U(-0.5, 0.5), is integrated with RK4 for ``burn_in``
    internal steps and then recorded every ``stride`` steps. Inputs are
    states 0..seq_len-1, targets the states ``horizon`` records later.
    """
    if not np.isfinite(F):
        raise ConfigurationError("F must be finite")
    if seq_len < 2 or n_seq < 1 or horizon < 1 or stride < 1:
        raise ConfigurationError("need seq_len >= 2 and positive n_seq, horizon and stride")
    rng = np.random.default_rng(seed)
    total = 3 * n_seq
    x0 = F + rng.uniform(-0.5, 0.5, size=(total, n_components))
    traj = lorenz96_trajectory(x0, F, seq_len + horizon, step, stride, burn_in)
    traj = traj.transpose(1, 0, 2)
    split = np.repeat(np.array(SPLITS, dtype=object), n_seq)
    return SequenceDataset(traj[:, :seq_len], traj[:, horizon:], split)


def noise_padded_task(n_samples: int = 4000, content_len: int = 32, pad_len: int = 968,
                      n_classes: int = 4, seed=0, d: int = 8, noise: float = 0.5,
                      contrast: float = 2.0, fractions=(0.8, 0.1, 0.1)) -> SequenceDataset:
    """Classification where only the first ``content_len`` steps carry the label.

    Each class has a fixed random prototype of shape (content_len, d) with
    entries 0.5 + contrast * (U(0, 1) - 0.5), i.e. centred on the pad mean;
    a sample's content is its class prototype plus Gaussian noise of std
    ``noise``. The remaining ``pad_len`` steps are U(0, 1) noise independent
    of the label. ``contrast=1`` makes the content range equal to the pad's.
    """
    if pad_len < 0 or content_len < 1 or n_classes < 2 or n_samples < 1:
        raise ConfigurationError("invalid task sizes")
    if not contrast > 0:
        raise ConfigurationError("contrast must be positive")
    rng = np.random.default_rng(seed)
    protos = 0.5 + contrast * (rng.uniform(0.0, 1.0, size=(n_classes, content_len, d)) - 0.5)
    labels = rng.integers(0, n_classes, size=n_samples)
    content = protos[labels] + noise * rng.standard_normal((n_samples, content_len, d))
    pad = rng.uniform(0.0, 1.0, size=(n_samples, pad_len, d))
    inputs = np.concatenate([content, pad], axis=1)
    counts = np.floor(np.asarray(fractions, dtype=float) * n_samples).astype(int)
    counts[0] = n_samples - counts[1:].sum()
    split = np.repeat(np.array(SPLITS, dtype=object), counts)
    return SequenceDataset(inputs, labels, split)


@dataclass
class Standardizer:
    """Per-feature affine scaling fitted on one dataset (normally the train split).

    Regression targets get their own scaling; class labels are left alone.
    """

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: Optional[np.ndarray] = None
    out_std: Optional[np.ndarray] = None

    @classmethod
    def fit(cls, data: SequenceDataset) -> "Standardizer":
        axes = (0, 1)
        in_std = data.inputs.std(axis=axes)
        if np.any(in_std == 0.0):
            raise ConfigurationError("an input feature is constant; cannot standardize")
        if data.is_classification:
            return cls(data.inputs.mean(axis=axes), in_std)
        out_std = data.targets.std(axis=axes)
        if np.any(out_std == 0.0):
            raise ConfigurationError("a target feature is constant; cannot standardize")
        return cls(data.inputs.mean(axis=axes), in_std, data.targets.mean(axis=axes), out_std)

    def transform(self, data: SequenceDataset) -> SequenceDataset:
        x = (data.inputs - self.in_mean) / self.in_std
        t = data.targets
        if self.out_mean is not None:
            t = (t - self.out_mean) / self.out_std
        return SequenceDataset(x, t, data.split)

    def inverse_targets(self, pred: np.ndarray) -> np.ndarray:
        if self.out_mean is None:
            return pred
        return pred * self.out_std + self.out_mean
