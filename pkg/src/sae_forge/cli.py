"""Command-line entry point: ``sae-forge {gen-data,train,eval,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error,
3 sweep finished with at least one failed cell.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import load_checkpoint
from .errors import ConfigError, SaeForgeError
from .evaluation import EvalConfig, evaluate_all
from .ingest import export_synthetic
from .metrics import METRIC_NAMES
from .plots import bar_chart, line_plot, table
from .sae import SparseAutoencoder
from .synthgen import GeneratorConfig, build_model
from .trainer import TrainConfig, TrainingDiverged, run_sweep, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
ENV_OUTPUT_DIR = "SAE_FORGE_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "sae_forge_out"

SWEEP_KEYS = ("k", "p_mask", "seed")
DEFAULT_SWEEP = {"k": [8, 16], "p_mask": [0.0, 0.2, 0.3, 0.5], "seed": [1, 2, 3, 4, 5]}


@dataclass
class RootConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SWEEP.items()})
    output_dir: str = None

    def resolved(self):
        return {
            "generator": asdict(self.generator),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "sweep": self.sweep,
            "output_dir": self.output_dir,
        }


def _check_value(section, name, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)) and not isinstance(default, bool):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int) and name != "p_mask":
            ok = float(value).is_integer()
            value = int(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: unexpected value {value!r}")
    return value


def _section(cls, obj, section):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(obj) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in obj.items():
        default = getattr(defaults, name)
        if value is None and name in ("p_mask", "data_path"):
            kwargs[name] = None
            continue
        kwargs[name] = _check_value(section, name, default, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def parse_config(obj):
    """Validate a config document (dict) and return a ``RootConfig`` with defaults applied."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - {"generator", "train", "eval", "sweep", "output_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    sweep = obj.get("sweep")
    if sweep is None:
        sweep = {k: list(v) for k, v in DEFAULT_SWEEP.items()}
    else:
        if not isinstance(sweep, dict):
            raise ConfigError("section 'sweep' must be an object")
        bad = sorted(set(sweep) - set(SWEEP_KEYS))
        if bad:
            raise ConfigError(f"unknown keys in 'sweep': {bad}")
        sweep = {k: list(sweep.get(k, DEFAULT_SWEEP[k])) for k in SWEEP_KEYS}
        if any(len(v) == 0 for v in sweep.values()):
            raise ConfigError("sweep grid is empty")
    out = obj.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir must be a string")
    cfg = RootConfig(
        generator=_section(GeneratorConfig, obj.get("generator"), "generator"),
        train=_section(TrainConfig, obj.get("train"), "train"),
        eval=_section(EvalConfig, obj.get("eval"), "eval"),
        sweep=sweep,
        output_dir=out,
    )
    cfg.generator.validate()
    cfg.train.validate()
    cfg.eval.validate()
    return cfg


def load_config(path):
    if path is None:
        return parse_config({})
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


def _output_dir(cfg, override=None):
    out = override or cfg.output_dir or os.environ.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR
    cfg.output_dir = out
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(cfg, out_dir):
    path = os.path.join(out_dir, "config.resolved.json")
    with open(path, "w") as f:
        json.dump(cfg.resolved(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _replace(obj, **changes):
    from dataclasses import replace

    return replace(obj, **{k: v for k, v in changes.items() if v is not None})


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    if args.out is None:
        raise ConfigError("gen-data needs --out PATH")
    if args.rows < 0:
        raise ConfigError("--rows must be >= 0")
    if args.masked is not None and not 0.0 <= args.masked <= 1.0:
        raise ConfigError("--masked must lie in [0, 1]")
    seed = cfg.train.seed if args.seed is None else args.seed
    model, hierarchy = build_model(cfg.generator)
    header = export_synthetic(args.out, model, hierarchy, seed, args.rows, cfg.generator.seq_len, args.masked)
    print(f"wrote {header.row_count} rows to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    cfg.train = _replace(cfg.train, seed=args.seed)
    out = _output_dir(cfg, args.out)
    _write_resolved(cfg, out)
    resume = args.resume
    if resume == "latest":
        resume = _latest_checkpoint(out)
        if resume is None:
            raise ConfigError(f"--resume: no checkpoint found under {out}/checkpoints")
    try:
        result = train(cfg.train, cfg.generator, out, resume=resume)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"last checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    final = result.checkpoints[-1] if result.checkpoints else resume
    print(f"trained {cfg.train.steps} steps; final checkpoint {final}")
    return EXIT_OK


def _latest_checkpoint(out):
    d = os.path.join(out, "checkpoints")
    if not os.path.isdir(d):
        return None
    names = sorted(n for n in os.listdir(d) if n.startswith("step_") and n.endswith(".ckpt"))
    return os.path.join(d, names[-1]) if names else None


def cmd_eval(args, cfg):
    cfg.eval = _replace(cfg.eval, seed=args.seed)
    out = _output_dir(cfg, args.out)
    if not os.path.isfile(args.checkpoint):
        raise SaeForgeError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint, expect_d=cfg.generator.d)
    _write_resolved(cfg, out)
    sae = SparseAutoencoder(ckpt.params, ckpt.variant)
    report = evaluate_all(
        sae,
        cfg.generator,
        cfg.eval,
        provenance={"checkpoint": os.path.basename(args.checkpoint), "step": ckpt.step, "train_seed": ckpt.rng_seed},
    )
    from .trainer import _jsonable

    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(_jsonable(report.as_dict()), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "diagnostics.json"), "w") as f:
        json.dump(_jsonable(report.diagnostics), f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["checkpoint", "variant", "k", "step", *METRIC_NAMES])
        w.writerow(
            [args.checkpoint, ckpt.variant.tag, ckpt.variant.k, ckpt.step]
            + [report.values.get(n, "") for n in METRIC_NAMES]
        )
    for name in METRIC_NAMES:
        shown = f"{report.values[name]:.4f}" if name in report.values else f"FAILED ({report.failures[name]})"
        print(f"{name:20s} {shown}")
    return EXIT_RUNTIME if report.failures else EXIT_OK


def cmd_sweep(args, cfg):
    cfg.eval = _replace(cfg.eval, seed=args.seed)
    out = _output_dir(cfg, args.out)
    _write_resolved(cfg, out)
    rows = run_sweep(cfg.sweep, cfg.train, cfg.generator, cfg.eval, out, jobs=args.jobs)
    write_sweep_plots(rows, out)
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed; results in {os.path.join(out, 'sweep.csv')}")
    if failed:
        print("failed cells: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- sweep summaries


def _p_label(p):
    return "none" if p in ("", None) else f"{float(p):g}"


def _mean(rows, metric):
    vals = [float(r[metric]) for r in rows if r.get(metric) not in ("", None)]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(rows, metric, by):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[b] for b in by), []).append(r)
    return {key: _mean(g, metric) for key, g in sorted(groups.items(), key=lambda kv: str(kv[0]))}


def ablation_table(rows):
    """Rows (label, cells) and column names: one column per masking probability."""
    ps = sorted({_p_label(r["p_mask"]) for r in rows}, key=lambda s: -1.0 if s == "none" else float(s))
    ks = sorted({int(r["k"]) for r in rows})
    out = []
    for metric, label in (("absorption_free", "Mean absorption-free"), ("explained_variance", "Explained variance")):
        for k in ks:
            cells = []
            for p in ps:
                sel = [r for r in rows if int(r["k"]) == k and _p_label(r["p_mask"]) == p]
                v = _mean(sel, metric)
                cells.append("" if np.isnan(v) else f"{v:.3f}")
            out.append((f"{label} (K={k})", cells))
    return out, [f"p={p}" for p in ps]


def write_sweep_plots(rows, out):
    paths = []
    ps = sorted({_p_label(r["p_mask"]) for r in rows}, key=lambda s: -1.0 if s == "none" else float(s))
    for metric in METRIC_NAMES:
        series = {}
        for p in ps:
            sel = [r for r in rows if _p_label(r["p_mask"]) == p]
            means = summarize(sel, metric, ("k",))
            pts = sorted((float(k[0]), v) for k, v in means.items() if not np.isnan(v))
            if pts:
                name = "w/o masking" if p in ("0", "none") else f"w/ masking p={p}"
                series[name] = pts
        path = os.path.join(out, f"{metric}_vs_l0.svg")
        with open(path, "w") as f:
            f.write(line_plot(series, f"{metric} vs l0", "l0 (K)", metric))
        paths.append(path)

    table_rows, columns = ablation_table(rows)
    path = os.path.join(out, "masking_ablation.svg")
    with open(path, "w") as f:
        f.write(table(table_rows, columns, "Masking probability ablation (mean over seeds)"))
    paths.append(path)
    with open(os.path.join(out, "masking_ablation.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", *columns])
        for label, cells in table_rows:
            w.writerow([label, *cells])

    bars = [("oracle", _mean(rows, "ood_auc_oracle"))]
    for p in ps:
        sel = [r for r in rows if _p_label(r["p_mask"]) == p]
        bars.append(("unmasked" if p in ("0", "none") else f"p={p}", _mean(sel, "ood_auc_sae")))
    bars = [(label, v) for label, v in bars if not np.isnan(v)]
    path = os.path.join(out, "ood_auc.svg")
    with open(path, "w") as f:
        f.write(bar_chart(bars, "Mean OOD AUC over shift presets", "AUC"))
    paths.append(path)
    return paths


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser():
    p = _Parser(prog="sae-forge", description="Train and evaluate sparse autoencoders on a toy token model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (all sections optional)")
        sp.add_argument("--seed", type=int, help="seed override")
        return sp

    g = common(sub.add_parser("gen-data", help="write an activation dump from the generator"))
    g.add_argument("--out", help="dump file to write")
    g.add_argument("--rows", type=int, default=4096)
    g.add_argument("--masked", type=float, metavar="P", help="mask tokens with probability P")

    t = common(sub.add_parser("train", help="train one SAE"))
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", nargs="?", const="latest", help="checkpoint to resume from (default: latest)")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("checkpoint")
    e.add_argument("--out", help="output directory")

    s = common(sub.add_parser("sweep", help="train and evaluate the K x p_mask x seed grid"))
    s.add_argument("--out", help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SaeForgeError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
