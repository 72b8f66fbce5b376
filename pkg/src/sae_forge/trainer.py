"""Deterministic SAE training loop, checkpointing and sweeps."""

import csv
import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataExhaustedError, NumericError, SaeForgeError
from .ingest import DumpReader, ShuffleBuffer, stream_batches
from .sae import (
    AdamState,
    SaeParams,
    SparseAutoencoder,
    SparsityVariant,
    adam_step,
    encode,
    loss_and_grads,
    normalize_decoder,
)
from .synthgen import GeneratorConfig, build_model, generate_rows


def default_groups(m):
    return (m // 8, m // 4, m // 2, m)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "MatryoshkaBatchTopK"
    k: int = 8
    group_sizes: tuple = ()  # empty: default_groups(m)
    l1_coeff: float = 0.0
    m: int = 256
    p_mask: float = 0.3  # None trains on the unmasked path
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    data_path: str = None  # None: fresh synthetic data
    shuffle_capacity: int = 4096
    repeat_data: bool = False
    checkpoint_every: int = 0  # 0: initial and final checkpoints only
    normalize_decoder: bool = True
    aux_loss: bool = False
    dead_window: int = 1000
    aux_k: int = 0  # 0: use k
    aux_coeff: float = 1.0 / 32
    divergence_factor: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))

    def sparsity_variant(self):
        groups = ()
        if self.variant == "MatryoshkaBatchTopK":
            groups = self.group_sizes or default_groups(self.m)
        return SparsityVariant(self.variant, self.k, groups, self.l1_coeff)

    def validate(self):
        self.sparsity_variant().validate(self.m)
        if self.p_mask is not None and not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must lie in [0, 1], got {self.p_mask}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.checkpoint_every < 0 or self.dead_window < 1:
            raise ConfigError("checkpoint_every must be >= 0 and dead_window >= 1")
        return self

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLogRecord:
    step: int
    recon: float
    sparsity: float
    aux: float
    total: float
    active: int
    dead: int
    wall_time: float = 0.0

    def as_json(self):
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    params: SaeParams
    adam: AdamState
    variant: SparsityVariant
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    last_fired: np.ndarray = None

    @property
    def sae(self):
        return SparseAutoencoder(self.params, self.variant)


class TrainingDiverged(NumericError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def init_params(d, m, rng):
    """Gaussian encoder with unit expected row norm; decoder is its normalized transpose."""
    W_enc = (rng.standard_normal((m, d)) / np.sqrt(d)).astype(np.float32)
    W_dec = normalize_decoder(np.ascontiguousarray(W_enc.T))
    return SaeParams(W_enc, np.zeros(m, np.float32), W_dec, np.zeros(d, np.float32))


class SyntheticSource:
    """Fresh generator rows; batch ``s`` is rows ``[s*B, (s+1)*B)`` of the training stream."""

    def __init__(self, gen_cfg, seed, batch_size, p_mask):
        self.gen_cfg = gen_cfg
        self.model, self.hierarchy = build_model(gen_cfg)
        self.seed = seed
        self.batch_size = batch_size
        self.p_mask = p_mask
        self.d = gen_cfg.d

    def batch(self, step):
        return generate_rows(
            self.model,
            self.hierarchy,
            self.seed,
            "train",
            self.batch_size,
            self.gen_cfg.seq_len,
            self.p_mask,
            start_row=step * self.batch_size,
        )


class DumpSource:
    """Shuffled full batches from an activation dump, optionally over several epochs.

    Masking cannot be applied to stored activations, so a masked run needs a
    dump whose metadata records the same masking probability.
    """

    def __init__(self, path, batch_size, capacity, seed, repeat, p_mask):
        self.reader = DumpReader(path)
        meta = self.reader.header.metadata
        dump_p = float(meta.get("p_mask", 0.0)) if meta.get("masked", meta.get("p_mask") is not None) else None
        want = p_mask or 0.0
        have = dump_p or 0.0
        if want > 0 and not self.reader.header.has_mask_flags:
            raise ConfigError(f"{path}: masked training (p_mask={p_mask}) needs a dump with mask flags")
        if want != have:
            raise ConfigError(f"{path}: dump was captured with p_mask={have}, config asks for {want}")
        self.d = self.reader.header.d
        self.batch_size = batch_size
        self.shuffle = ShuffleBuffer(capacity, seed)
        self.repeat = repeat
        self._iter = None
        self._next = None

    def _batches(self):
        epoch = 0
        while True:
            produced = False
            for b in stream_batches(self.reader, self.batch_size, self.shuffle, epoch):
                if b.partial:
                    continue
                produced = True
                yield b
            if not self.repeat or not produced:
                return
            epoch += 1

    def batch(self, step):
        if self._iter is None or step != self._next:
            self._iter = self._batches()
            for _ in range(step):
                if next(self._iter, None) is None:
                    break
        b = next(self._iter, None)
        if b is None:
            raise DataExhaustedError(
                f"dump {self.reader.path} exhausted after {step} batches of {self.batch_size} (repeat_data is off)"
            )
        self._next = step + 1
        return b


def make_source(cfg, gen_cfg):
    if cfg.data_path:
        return DumpSource(cfg.data_path, cfg.batch_size, cfg.shuffle_capacity, cfg.seed, cfg.repeat_data, cfg.p_mask)
    return SyntheticSource(gen_cfg or GeneratorConfig(), cfg.seed, cfg.batch_size, cfg.p_mask)


def _ckpt_path(out_dir, step):
    return os.path.join(out_dir, "checkpoints", f"step_{step:07d}.ckpt")


def _check_resume(ckpt, cfg, variant, d):
    expected = {
        "D": d,
        "m": cfg.m,
        "variant": variant,
        "rng_seed": cfg.seed,
        "normalize_decoder": cfg.normalize_decoder,
    }
    found = {
        "D": ckpt.params.d,
        "m": ckpt.params.m,
        "variant": ckpt.variant,
        "rng_seed": ckpt.rng_seed,
        "normalize_decoder": ckpt.normalize_decoder,
    }
    bad = [k for k in expected if expected[k] != found[k]]
    if bad:
        raise ConfigError(f"cannot resume: checkpoint disagrees with config on {bad}")
    if ckpt.step > cfg.steps:
        raise ConfigError(f"cannot resume: checkpoint step {ckpt.step} is past steps={cfg.steps}")


def _open_log(path, start):
    """Open a JSON-lines log for appending after dropping records past ``start``.

    A run interrupted between checkpoints may have logged steps that the
    resumed run will redo.
    """
    kept = []
    if start > 0 and os.path.exists(path):
        with open(path) as f:
            kept = [line for line in f if line.strip() and json.loads(line)["step"] <= start]
    f = open(path, "w")
    f.writelines(kept)
    return f


def train(cfg, gen_cfg=None, out_dir=None, resume=None, source=None):
    """Run ``cfg.steps`` Adam steps and return the final parameters and log.

    With ``out_dir`` set, checkpoints go to ``out_dir/checkpoints`` (initial,
    every ``checkpoint_every`` steps and final) and the per-step log to
    ``out_dir/train_log.jsonl``; wall-clock timings are kept apart in
    ``train_timing.jsonl`` so the log itself is reproducible.
    """
    cfg.validate()
    source = source or make_source(cfg, gen_cfg)
    variant = cfg.sparsity_variant()
    d = source.d

    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resume(ckpt, cfg, variant, d)
        params, adam, start = ckpt.params, ckpt.adam, ckpt.step
        last_fired = ckpt.last_fired if ckpt.last_fired is not None else np.zeros(cfg.m, np.int64)
    else:
        params = init_params(d, cfg.m, rngmod.stream(cfg.seed, "init"))
        adam = AdamState.zeros_like(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        start = 0
        last_fired = np.zeros(cfg.m, np.int64)

    result = TrainResult(params, adam, variant, last_fired=last_fired)
    log_f = timing_f = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        log_f = _open_log(os.path.join(out_dir, "train_log.jsonl"), start)
        timing_f = _open_log(os.path.join(out_dir, "train_timing.jsonl"), start)

    def checkpoint(step):
        if out_dir is None:
            return
        ck = Checkpoint(
            result.params, result.adam, variant, step, cfg.seed, cfg.normalize_decoder, result.last_fired.copy()
        )
        result.checkpoints.append(save_checkpoint(_ckpt_path(out_dir, step), ck))

    try:
        if resume is None:
            checkpoint(0)
        t0 = time.perf_counter()
        for step in range(start, cfg.steps):
            x = source.batch(step).x
            try:
                codes = encode(result.params, x, variant)
                dead = (step - result.last_fired) >= cfg.dead_window
                parts, grads = loss_and_grads(
                    result.params,
                    x,
                    variant,
                    codes=codes,
                    dead_mask=dead if cfg.aux_loss else None,
                    aux_k=cfg.aux_k or None,
                    aux_coeff=cfg.aux_coeff,
                )
                scale = float(np.mean(np.sum(np.asarray(x, np.float64) ** 2, axis=1)))
                if parts.total > cfg.divergence_factor * max(scale, 1e-12):
                    raise NumericError(
                        f"loss {parts.total:.3e} exceeds {cfg.divergence_factor:g}x the batch energy {scale:.3e}"
                    )
                result.params, result.adam = adam_step(result.params, grads, result.adam, cfg.normalize_decoder)
            except NumericError as exc:
                last = result.checkpoints[-1] if result.checkpoints else resume
                raise TrainingDiverged(f"training diverged at step {step}: {exc}", last) from exc
            result.last_fired = np.where(codes.active_mask.any(axis=0), step + 1, result.last_fired)
            rec = TrainLogRecord(
                step=step + 1,
                recon=parts.recon,
                sparsity=parts.sparsity,
                aux=parts.aux,
                total=parts.total,
                active=codes.n_active,
                dead=int(dead.sum()),
                wall_time=time.perf_counter() - t0,
            )
            result.log.append(rec)
            if log_f is not None:
                log_f.write(json.dumps(rec.as_json()) + "\n")
                timing_f.write(json.dumps({"step": rec.step, "wall_time": rec.wall_time}) + "\n")
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done != cfg.steps:
                checkpoint(done)
        if cfg.steps > start:
            checkpoint(cfg.steps)
    finally:
        if log_f is not None:
            log_f.close()
            timing_f.close()
    return result


# ---------------------------------------------------------------- sweeps

CONFIG_COLUMNS = ("cell", "variant", "k", "p_mask", "seed", "m", "d", "steps", "batch_size", "lr")


def expand_grid(grid):
    """Cells of the ``k x p_mask x seed`` grid in fixed order (k outermost)."""
    ks = list(grid.get("k", [None]))
    ps = list(grid.get("p_mask", [None]))
    seeds = list(grid.get("seed", [None]))
    cells = list(itertools.product(ks, ps, seeds))
    if not cells or not (ks and ps and seeds):
        raise ConfigError("sweep grid is empty")
    return cells


def _cell_config(base, k, p, seed):
    changes = {}
    if k is not None:
        changes["k"] = int(k)
    if p is not None:
        changes["p_mask"] = float(p)
    if seed is not None:
        changes["seed"] = int(seed)
    return replace(base, **changes)


def _cell_name(cfg):
    p = "none" if cfg.p_mask is None else f"{cfg.p_mask:g}"
    return f"k{cfg.k}_p{p}_s{cfg.seed}"


def _run_cell(args):
    cfg, gen_cfg, eval_cfg, eval_data, cell_dir = args
    from .evaluation import evaluate_all

    report_path = os.path.join(cell_dir, "report.json")
    if os.path.exists(report_path):
        with open(report_path) as f:
            saved = json.load(f)
        if saved.get("status") == "ok" and saved.get("config_digest") == cfg.digest():
            return saved
    os.makedirs(cell_dir, exist_ok=True)
    row = {"status": "ok", "error": "", "config_digest": cfg.digest(), "metrics": {}}
    try:
        result = train(cfg, gen_cfg)
        report = evaluate_all(
            result.sae,
            gen_cfg,
            eval_cfg,
            data=eval_data,
            provenance={"train_config": asdict(cfg), "train_config_digest": cfg.digest()},
        )
        row["metrics"] = report.values
        row["report"] = report.as_dict()
        if report.failures:
            row["status"] = "metric_failure"
            row["error"] = "; ".join(f"{k}: {v}" for k, v in sorted(report.failures.items()))
        with open(os.path.join(cell_dir, "diagnostics.json"), "w") as f:
            json.dump(_jsonable(report.diagnostics), f, indent=1, sort_keys=True)
    except (SaeForgeError, ValueError, ArithmeticError) as exc:
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    with open(report_path, "w") as f:
        json.dump(_jsonable(row), f, indent=1, sort_keys=True)
    return row


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def run_sweep(grid, base_config, gen_cfg=None, eval_cfg=None, out_dir="sweep", jobs=1):
    """Train and evaluate every grid cell; write ``out_dir/sweep.csv``.

    Cells are independent: a finished cell (``cells/<name>/report.json``) is
    reused on rerun, and a failing cell is recorded without stopping the sweep.
    Returns the list of CSV row dicts.
    """
    from .evaluation import EvalConfig, build_eval_data
    from .metrics import METRIC_NAMES

    gen_cfg = gen_cfg or GeneratorConfig()
    eval_cfg = eval_cfg or EvalConfig()
    cells = [_cell_config(base_config, *c) for c in expand_grid(grid)]
    for cfg in cells:
        cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    eval_data = build_eval_data(gen_cfg, eval_cfg)
    work = [(cfg, gen_cfg, eval_cfg, eval_data, os.path.join(out_dir, "cells", _cell_name(cfg))) for cfg in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, work))
    else:
        outcomes = [_run_cell(w) for w in work]

    rows = []
    for cfg, out in zip(cells, outcomes):
        row = {
            "cell": _cell_name(cfg),
            "variant": cfg.variant,
            "k": cfg.k,
            "p_mask": "" if cfg.p_mask is None else cfg.p_mask,
            "seed": cfg.seed,
            "m": cfg.m,
            "d": gen_cfg.d,
            "steps": cfg.steps,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
        }
        for name in METRIC_NAMES:
            v = out.get("metrics", {}).get(name)
            row[name] = "" if v is None else v
        row["status"] = out["status"]
        row["error"] = out["error"]
        rows.append(row)
    write_sweep_csv(os.path.join(out_dir, "sweep.csv"), rows)
    return rows


def write_sweep_csv(path, rows):
    from .metrics import METRIC_NAMES

    columns = list(CONFIG_COLUMNS) + list(METRIC_NAMES) + ["status", "error"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
    return columns
