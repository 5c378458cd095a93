"""Sequence CSV files, checkpoints and metrics logs.

Sequence CSV: one row per (sequence, step) with columns
``seq_id, step, x_1..x_d`` followed by ``target`` (one column) or
``target_1..target_k``, and optionally a trailing ``split`` column. For
classification the label is repeated on every row of its sequence.

Checkpoints are JSON documents tagged ``"format": "unicornn-ckpt-1"``.
Arrays are stored as a shape plus a space-separated string of floats in
17 significant digits, which round-trips doubles exactly.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .core import ConfigurationError, LayerParams, ModelConfig
from .model import Model
from .tasks import SPLITS, SequenceDataset
from .train import OptimState

CHECKPOINT_FORMAT = "unicornn-ckpt-1"
METRIC_COLUMNS = ("epoch", "split", "metric", "value", "wall_time")


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------- sequence CSV

@dataclass
class CsvSchema:
    """Column layout of a sequence CSV: ``d`` inputs and ``k`` targets."""

    d: int
    k: int = 1
    classification: bool = False
    has_split: bool = False

    def header(self) -> list:
        cols = ["seq_id", "step"] + [f"x_{i + 1}" for i in range(self.d)]
        cols += ["target"] if self.k == 1 else [f"target_{j + 1}" for j in range(self.k)]
        if self.has_split:
            cols.append("split")
        return cols


def write_csv_sequences(data: SequenceDataset, path, include_split: bool = True) -> CsvSchema:
    k = 1 if data.is_classification else data.targets.shape[2]
    schema = CsvSchema(data.d, k, data.is_classification, include_split)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(schema.header())
        for s in range(len(data)):
            for n in range(data.n_steps):
                row = [s, n] + [_fmt(v) for v in data.inputs[s, n]]
                if data.is_classification:
                    row.append(int(data.targets[s]))
                else:
                    row += [_fmt(v) for v in data.targets[s, n]]
                if include_split:
                    row.append(data.split[s])
                wr.writerow(row)
    return schema


def load_csv_sequences(path, schema: CsvSchema) -> SequenceDataset:
    """Parse a sequence CSV written in the layout above.

    Sequences keep their order of first appearance; steps must run
    0..N-1 and every sequence must have the same N.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    expected = schema.header()
    seqs = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            raise DataFormatError("empty dataset: file has no header")
        if [h.strip() for h in header] != expected:
            raise DataFormatError(f"header {header} does not match schema {expected}", 1)
        for row in rd:
            line = rd.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise DataFormatError(f"expected {len(expected)} fields, found {len(row)}", line)
            try:
                step = int(row[1])
                x = [float(v) for v in row[2:2 + schema.d]]
                tcols = row[2 + schema.d:2 + schema.d + schema.k]
                t = [int(tcols[0])] if schema.classification else [float(v) for v in tcols]
            except ValueError as exc:
                raise DataFormatError(f"unparsable value ({exc})", line) from None
            if not all(np.isfinite(x)) or not all(np.isfinite(t)):
                raise DataFormatError("non-finite value", line)
            split = row[-1].strip() if schema.has_split else "train"
            if split not in SPLITS:
                raise DataFormatError(f"unknown split {split!r}", line)
            seqs.setdefault(row[0], []).append((step, x, t, split, line))
    if not seqs:
        raise DataFormatError("empty dataset: no data rows")
    inputs, targets, splits = [], [], []
    length = None
    for sid, rows in seqs.items():
        rows.sort(key=lambda r: r[0])
        steps = [r[0] for r in rows]
        if steps != list(range(len(rows))):
            raise DataFormatError(f"sequence {sid!r}: steps are not 0..{len(rows) - 1}", rows[0][4])
        if length is None:
            length = len(rows)
        elif len(rows) != length:
            raise DataFormatError(f"sequence {sid!r} has {len(rows)} steps, expected {length}",
                                  rows[0][4])
        if len({r[3] for r in rows}) != 1:
            raise DataFormatError(f"sequence {sid!r} mixes splits", rows[0][4])
        inputs.append([r[1] for r in rows])
        if schema.classification:
            labels = {r[2][0] for r in rows}
            if len(labels) != 1:
                raise DataFormatError(f"sequence {sid!r} has inconsistent labels", rows[0][4])
            targets.append(labels.pop())
        else:
            targets.append([r[2] for r in rows])
        splits.append(rows[0][3])
    return SequenceDataset(np.array(inputs), np.array(targets), np.array(splits, dtype=object))


# ----------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    optimizer: Optional[OptimState]
    seed: Optional[int]
    metadata: dict


def _enc(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": " ".join(_fmt(v) for v in a.ravel())}


def _dec(obj, name) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        text = obj["data"].split()
        vals = np.array([float(v) for v in text], dtype=np.float64)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupted array {name}: {exc}") from None
    if vals.size != int(np.prod(shape)):
        raise CheckpointError(f"array {name}: {vals.size} values for shape {shape}")
    return vals.reshape(shape)


def save_checkpoint(model: Model, path, opt: Optional[OptimState] = None,
                    seed: Optional[int] = None, metadata: Optional[dict] = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "params": {k: _enc(v) for k, v in model.parameters().items()},
        "optimizer": None,
        "seed": seed,
        "metadata": metadata or {},
    }
    if opt is not None:
        doc["optimizer"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "step": opt.step,
            "m": {k: _enc(v) for k, v in opt.m.items()},
            "v": {k: _enc(v) for k, v in opt.v.items()},
        }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the stored shapes are checked against it."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        got = doc.get("format") if isinstance(doc, dict) else None
        raise CheckpointError(f"unsupported checkpoint format {got!r}; expected {CHECKPOINT_FORMAT!r}")
    try:
        cfg = ModelConfig(**doc["config"])
        raw = doc["params"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted checkpoint config: {exc}") from None
    arrays = {k: _dec(v, k) for k, v in raw.items()}
    if expected is not None:
        _check_against(arrays, expected)
    layers = []
    for l in range(cfg.L):
        try:
            kw = {n: arrays[f"layers.{l}.{n}"] for n in ("w", "V", "b", "c")}
        except KeyError as exc:
            raise CheckpointError(f"layer {l + 1}: missing parameter {exc}") from None
        kw["lam"] = arrays.get(f"layers.{l}.lam")
        layers.append(LayerParams(**kw))
    try:
        model = Model(cfg, layers, arrays["readout.W"], arrays["readout.b"])
    except KeyError as exc:
        raise CheckpointError(f"missing readout parameter {exc}") from None
    except ConfigurationError as exc:
        raise CheckpointError(str(exc)) from None
    opt = None
    if doc.get("optimizer"):
        o = doc["optimizer"]
        opt = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         step=o["step"], m={k: _dec(v, k) for k, v in o["m"].items()},
                         v={k: _dec(v, k) for k, v in o["v"].items()})
    return Checkpoint(model, opt, doc.get("seed"), doc.get("metadata", {}))


def _check_against(arrays, cfg: ModelConfig):
    for l in range(cfg.L):
        want = {"w": (cfg.m,), "V": (cfg.m, cfg.layer_input_dim(l)), "b": (cfg.m,), "c": (cfg.m,)}
        if cfg.has_skip(l):
            want["lam"] = (cfg.m, cfg.m)
        for n, shape in want.items():
            key = f"layers.{l}.{n}"
            if key not in arrays:
                raise CheckpointError(f"layer {l + 1}: checkpoint has no {n} (expected shape {shape})")
            if arrays[key].shape != shape:
                raise CheckpointError(
                    f"layer {l + 1}: {n} has shape {arrays[key].shape}, expected {shape}")
    extra = sorted(k for k in arrays if k.startswith("layers.") and int(k.split(".")[1]) >= cfg.L)
    if extra:
        raise CheckpointError(f"checkpoint has layers beyond L={cfg.L}: {extra[0]}")


# --------------------------------------------------------------- metrics

def write_metrics(history, path):
    """Append metric rows to a CSV, writing the header only for a new file."""
    if not history:
        raise ValueError("empty metric history")
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(METRIC_COLUMNS)
        for r in history:
            wr.writerow([int(r["epoch"]), r["split"], r["metric"], _fmt(r["value"]),
                         _fmt(r["wall_time"])])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise DataFormatError(f"metrics header {header} != {list(METRIC_COLUMNS)}", 1)
        rows = []
        for row in rd:
            try:
                rows.append({"epoch": int(row[0]), "split": row[1], "metric": row[2],
                             "value": float(row[3]), "wall_time": float(row[4])})
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"bad metrics row ({exc})", rd.line_num) from None
    return rows


def metric_series(rows, split: str, metric: str):
    """(epochs, values) arrays for one split/metric, ready for plotting."""
    sel = [(r["epoch"], r["value"]) for r in rows if r["split"] == split and r["metric"] == metric]
    if not sel:
        return np.array([], dtype=int), np.array([])
    e, v = zip(*sel)
    return np.array(e), np.array(v)
