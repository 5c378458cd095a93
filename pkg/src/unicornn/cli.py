"""Command-line front end: train, eval, verify, bench and gen-data.

Run settings come from, in increasing priority: built-in defaults, a named
preset, an INI config file (``--config``) and command-line flags. The
config file has sections ``[model]``, ``[train]``, ``[task]`` and
``[run]``; unknown sections or keys are rejected before any compute.

Exit codes: 0 success, 1 check or metric failure, 2 usage or config error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import _kernels
from .core import ConfigurationError, ModelConfig
from .train import PRESETS, TrainConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

TASKS = ("lorenz96", "noise", "csv")


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(kind):
    def parse(v):
        if v is None or str(v).strip().lower() in ("", "none"):
            return None
        return kind(v)
    return parse


def _dt_list(v):
    if isinstance(v, (int, float)):
        return float(v)
    parts = [float(p) for p in str(v).replace(",", " ").split()]
    return parts[0] if len(parts) == 1 else parts


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "L": (int, 2), "m": (int, 32), "dt": (_dt_list, 0.1), "dt_first": (_opt(float), None),
        "alpha": (float, 1.0), "skip": (_opt(int), None), "dropout": (float, 0.0),
    },
    "train": {
        "epochs": (int, 10), "lr": (float, 1e-3), "lr_drop_epoch": (_opt(int), None),
        "lr_drop_factor": (float, 10.0), "batch_size": (int, 32), "optimizer": (str, "adam"),
        "clip": (_opt(float), None), "seed": (int, 0),
    },
    "task": {
        "name": (str, "lorenz96"), "F": (float, 0.9), "n_seq": (int, 128), "seq_len": (int, 2000),
        "stride": (int, 5), "horizon": (int, 1), "n_samples": (int, 4000),
        "content_len": (int, 32), "pad_len": (int, 968), "n_classes": (int, 4),
        "contrast": (float, 2.0), "data": (_opt(str), None), "d": (_opt(int), None), "k": (int, 1),
        "classification": (_bool, False), "standardize": (_bool, True), "data_seed": (int, 0),
    },
    "run": {"out": (str, "runs/latest")},
}

# where preset keys land
_PRESET_SECTION = {"task": ("task", "name")}
for _sec, _keys in SCHEMA.items():
    for _k in _keys:
        _PRESET_SECTION.setdefault(_k, (_sec, _k))


def default_config() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def _set(cfg, section, key, value, origin):
    if section not in SCHEMA:
        raise ConfigurationError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigurationError(f"{origin}: unknown key {key!r} in [{section}]")
    parse = SCHEMA[section][key][0]
    try:
        cfg[section][key] = parse(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{origin}: bad value for {section}.{key}: {exc}") from None


def apply_preset(cfg, name):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    for k, v in PRESETS[name].items():
        sec, key = _PRESET_SECTION[k]
        _set(cfg, sec, key, v, f"preset {name}")


def read_config_file(cfg, path):
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    # keys are case-sensitive (L, F)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    for sec in parser.sections():
        for key, value in parser.items(sec):
            _set(cfg, sec, key, value, path)


def write_config_file(cfg, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, keys in cfg.items():
        parser[sec] = {}
        for k, v in keys.items():
            if isinstance(v, list):
                v = " ".join(repr(x) for x in v)
            parser[sec][k] = "none" if v is None else str(v)
    with open(path, "w") as fh:
        parser.write(fh)


def model_config(cfg, d, out_dim, classification) -> ModelConfig:
    mc = cfg["model"]
    dt = mc["dt"]
    if mc["dt_first"] is not None:
        rest = dt if isinstance(dt, list) else [dt] * (mc["L"] - 1)
        dt = [mc["dt_first"]] + list(rest)[:mc["L"] - 1]
    return ModelConfig(L=mc["L"], m=mc["m"], d=d, dt=dt, alpha=mc["alpha"], skip=mc["skip"],
                       dropout=mc["dropout"], out_dim=out_dim,
                       readout="final" if classification else "sequence")


def train_config(cfg, classification) -> TrainConfig:
    tc = cfg["train"]
    return TrainConfig(epochs=tc["epochs"], lr=tc["lr"], lr_drop_epoch=tc["lr_drop_epoch"],
                       lr_drop_factor=tc["lr_drop_factor"], batch_size=tc["batch_size"],
                       seed=tc["seed"], optimizer=tc["optimizer"], clip=tc["clip"],
                       task="classification" if classification else "regression")


def load_task_data(cfg):
    """The dataset named by ``[task]``, with train, valid and test splits."""
    from .fileio import CsvSchema, load_csv_sequences
    from .tasks import lorenz96_generate, noise_padded_task

    t = cfg["task"]
    if t["name"] == "lorenz96":
        return lorenz96_generate(t["F"], n_seq=t["n_seq"], seq_len=t["seq_len"],
                                 seed=t["data_seed"], stride=t["stride"], horizon=t["horizon"])
    if t["name"] == "noise":
        return noise_padded_task(n_samples=t["n_samples"], content_len=t["content_len"],
                                 pad_len=t["pad_len"], n_classes=t["n_classes"], contrast=t["contrast"],
                                 seed=t["data_seed"])
    if t["name"] == "csv":
        if t["data"] is None:
            raise ConfigurationError("task csv needs a data path (--data)")
        if not os.path.exists(t["data"]):
            raise ConfigurationError(f"dataset not found: {t['data']}")
        if t["d"] is None:
            raise ConfigurationError("task csv needs the input width d")
        schema = CsvSchema(t["d"], t["k"], t["classification"], has_split=True)
        return load_csv_sequences(t["data"], schema)
    raise ConfigurationError(f"unknown task {t['name']!r}; choose from {list(TASKS)}")


def _threads(args):
    n = args.threads
    if n is None:
        env = os.environ.get("UNICORNN_THREADS")
        if env is not None:
            try:
                n = int(env)
            except ValueError:
                raise ConfigurationError(f"UNICORNN_THREADS must be an integer, got {env!r}") from None
        else:
            n = os.cpu_count() or 1
    if n < 1:
        raise ConfigurationError("thread count must be >= 1")
    _kernels.set_num_threads(n)


def _merged_config(args):
    cfg = default_config()
    if getattr(args, "preset", None):
        apply_preset(cfg, args.preset)
    if getattr(args, "config", None):
        read_config_file(cfg, args.config)
    flags = {
        "task": ("task", "name"), "data": ("task", "data"), "F": ("task", "F"),
        "seed": ("train", "seed"), "epochs": ("train", "epochs"), "lr": ("train", "lr"),
        "batch_size": ("train", "batch_size"), "L": ("model", "L"), "m": ("model", "m"),
        "dt": ("model", "dt"), "alpha": ("model", "alpha"), "out": ("run", "out"),
    }
    for attr, (sec, key) in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set(cfg, sec, key, v, "command line")
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        _set(cfg, sec.strip(), key.strip(), value.strip(), "--set")
    return cfg


def _split_data(data, standardize):
    from .tasks import Standardizer

    sizes = data.sizes()
    for s in ("train", "valid"):
        if sizes[s] == 0:
            raise ConfigurationError(f"dataset has no {s} sequences")
    parts = {s: data.subset(s) for s in ("train", "valid", "test")}
    scaler = Standardizer.fit(parts["train"]) if standardize else None
    if scaler is not None:
        parts = {s: (scaler.transform(p) if len(p) else p) for s, p in parts.items()}
    return parts, scaler


def _report_metrics(model, part, raw, scaler, task):
    """Metrics on one split; regression NRMSE is in the data's original units."""
    from .model import nrmse
    from .train import evaluate, predict

    out = evaluate(model, part, task)
    if task == "regression" and scaler is not None:
        out["nrmse"] = nrmse(scaler.inverse_targets(predict(model, part)), raw.targets)
    return out


def cmd_train(args) -> int:
    from .fileio import save_checkpoint, write_metrics
    from .train import fit, init_params

    cfg = _merged_config(args)
    data = load_task_data(cfg)
    classification = data.is_classification
    out_dim = int(data.targets.max()) + 1 if classification else data.targets.shape[2]
    mcfg = model_config(cfg, data.d, out_dim, classification)
    tcfg = train_config(cfg, classification)
    parts, scaler = _split_data(data, cfg["task"]["standardize"])

    out = cfg["run"]["out"]
    os.makedirs(out, exist_ok=True)
    write_config_file(cfg, os.path.join(out, "config.ini"))
    model = init_params(mcfg, tcfg.seed)
    quiet = args.quiet

    def log(epoch, loss, valid):
        if not quiet:
            shown = ", ".join(f"{k} {v:.4g}" for k, v in valid.items())
            print(f"epoch {epoch:3d}  train loss {loss:.4g}  valid {shown}", flush=True)

    result = fit(model, parts["train"], parts["valid"], tcfg, log=log)
    metrics_path = os.path.join(out, "metrics.csv")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    if result.history:
        write_metrics(result.history, metrics_path)
    meta = {"config": cfg, "best_epoch": result.best_epoch}
    if scaler is not None:
        meta["standardizer"] = {k: (None if v is None else np.asarray(v).tolist())
                                for k, v in vars(scaler).items()}
    save_checkpoint(result.model, os.path.join(out, "best.ckpt.json"), seed=tcfg.seed,
                    metadata=meta)
    if result.failed:
        print(f"error: training diverged: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    task = tcfg.task
    final = {}
    for split in ("valid", "test"):
        if len(parts[split]):
            final[split] = _report_metrics(result.model, parts[split], data.subset(split),
                                           scaler, task)
    with open(os.path.join(out, "final.json"), "w") as fh:
        json.dump({"best_epoch": result.best_epoch, **final}, fh, indent=1)
    for split, vals in final.items():
        print(f"{split}: " + ", ".join(f"{k} {v:.6g}" for k, v in vals.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .fileio import load_checkpoint
    from .tasks import Standardizer

    if not os.path.exists(args.checkpoint):
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = default_config()
    stored = ckpt.metadata.get("config", {})
    for sec, keys in stored.items():
        for k, v in keys.items():
            _set(cfg, sec, k, v, args.checkpoint)
    if args.data is not None:
        _set(cfg, "task", "data", args.data, "command line")
        _set(cfg, "task", "name", "csv", "command line")
    data = load_task_data(cfg)
    part = data.subset(args.split)
    if len(part) == 0:
        raise ConfigurationError(f"dataset has no {args.split} sequences")
    scaler = None
    st = ckpt.metadata.get("standardizer")
    if st is not None:
        scaler = Standardizer(**{k: (None if v is None else np.asarray(v)) for k, v in st.items()})
    task = "classification" if data.is_classification else "regression"
    metrics = _report_metrics(ckpt.model, scaler.transform(part) if scaler else part, part,
                              scaler, task)
    print(f"{args.split}: " + ", ".join(f"{k} {v:.6g}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checks import SUITES, run_suite

    if args.suite != "all" and args.suite not in SUITES:
        raise ConfigurationError(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}")
    records = run_suite(args.suite)
    for r in records:
        print(r.line(), flush=True)
    failed = [r for r in records if not r.passed]
    print(f"{len(records) - len(failed)}/{len(records)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench, write_bench_csv

    res = run_bench(args.N, args.m, args.L, args.batch, repeats=args.repeats, seed=args.seed or 0)
    fused, naive = res.mean("fused"), res.mean("naive")
    print(f"N={args.N} m={args.m} L={args.L} batch={args.batch} repeats={args.repeats}")
    print(f"fused  mean {fused:.6g} s")
    print(f"naive  mean {naive:.6g} s")
    print(f"speedup {naive / fused:.3g}x")
    if args.out:
        write_bench_csv(res, args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .fileio import write_csv_sequences
    from .tasks import lorenz96_generate, noise_padded_task

    seed = args.seed or 0
    if args.task == "lorenz96":
        data = lorenz96_generate(args.F, n_seq=args.n_seq, seq_len=args.seq_len, seed=seed,
                                 stride=args.stride, horizon=args.horizon)
    else:
        data = noise_padded_task(n_samples=args.n_samples, pad_len=args.pad_len, seed=seed)
    write_csv_sequences(data, args.out)
    sizes = data.sizes()
    print(f"wrote {len(data)} sequences ({sizes['train']}/{sizes['valid']}/{sizes['test']}) "
          f"of length {data.n_steps} to {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unicornn", description="Train and check undamped independent oscillator RNNs.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for the recurrence (default: $UNICORNN_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model and write metrics and the best checkpoint")
    t.add_argument("--config", help="INI file with [model], [train], [task], [run] sections")
    t.add_argument("--preset", help=f"named settings: {', '.join(PRESETS)}")
    t.add_argument("--task", choices=TASKS, help="dataset source")
    t.add_argument("--data", help="sequence CSV path (task csv)")
    t.add_argument("--F", type=float, help="Lorenz 96 forcing")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--L", type=int, help="number of layers")
    t.add_argument("--m", type=int, help="units per layer")
    t.add_argument("--dt", help="time step (one value, or one per layer)")
    t.add_argument("--alpha", type=float, help="restoring-force coefficient")
    t.add_argument("--out", help="run directory (default runs/latest)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    t.add_argument("--quiet", action="store_true", help="no per-epoch log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("checkpoint", help="checkpoint written by train")
    e.add_argument("--data", help="sequence CSV to evaluate instead of the training task")
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical and theoretical checks")
    v.add_argument("--suite", default="all",
                   help="all, inversion, memory, volume, state-bounds, grad-bound, fd-match, "
                        "vanishing-probe or scaling-probe")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time fused against step-by-step forward+backward")
    b.add_argument("--N", type=int, default=1000, help="sequence length")
    b.add_argument("--m", type=int, default=128, help="units per layer")
    b.add_argument("--L", type=int, default=2, help="number of layers")
    b.add_argument("--batch", type=int, default=128, help="batch size")
    b.add_argument("--repeats", type=int, default=20, help="timed batches per implementation")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="write per-batch timings as CSV")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as sequence CSV")
    g.add_argument("task", choices=("lorenz96", "noise"))
    g.add_argument("--out", required=True, help="output CSV path")
    g.add_argument("--F", type=float, default=0.9, help="Lorenz 96 forcing")
    g.add_argument("--n-seq", dest="n_seq", type=int, default=128, help="sequences per split")
    g.add_argument("--seq-len", dest="seq_len", type=int, default=2000)
    g.add_argument("--stride", type=int, default=5, help="internal steps per recorded step")
    g.add_argument("--horizon", type=int, default=1, help="prediction horizon in records")
    g.add_argument("--n-samples", dest="n_samples", type=int, default=4000, help="noise task size")
    g.add_argument("--pad-len", dest="pad_len", type=int, default=968, help="noise task padding")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    from .core import NumericalStabilityError
    from .fileio import CheckpointError, DataFormatError

    args = build_parser().parse_args(argv)
    try:
        _threads(args)
        return args.func(args)
    except (ConfigurationError, DataFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalStabilityError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
