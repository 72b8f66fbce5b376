"""Held-out evaluation data and the full metric suite for one SAE."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, SaeForgeError
from .metrics import (
    METRIC_NAMES,
    AbsorptionConfig,
    EvalSet,
    MetricReport,
    ProbeTrainConfig,
    ScrSet,
    absorption_free_score,
    explained_variance,
    ood_probing,
    scr_score,
    sparse_probing_score,
    split_mask,
    tpp_score,
)
from .synthgen import SHIFT_PRESETS, build_model, generate_rows, shift_distribution


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 1000  # eval streams use their own domains, so they never overlap training rows
    n_rows: int = 4096
    train_fraction: float = 0.8
    tau_main: float = 0.5
    tau_abs: float = 0.4
    tau_cos: float = 0.1
    k_max: int = 3
    eps: float = 1e-8
    k_list: tuple = (1, 2, 5)
    k_tpp: int = 10
    k_scr: int = 10
    scr_per_cell: int = 200
    scr_pairs: tuple = ((0, 1),)
    scr_max_pool: int = 400_000
    shifts: tuple = tuple(SHIFT_PRESETS)
    ood_rows: int = 4096
    probe_l2: float = 1e-3
    probe_steps: int = 500
    probe_lr: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        object.__setattr__(self, "scr_pairs", tuple(tuple(int(i) for i in p) for p in self.scr_pairs))
        object.__setattr__(self, "shifts", tuple(self.shifts))

    def validate(self):
        unknown = [s for s in self.shifts if s not in SHIFT_PRESETS]
        if unknown:
            raise ConfigError(f"unknown shift presets {unknown}; known: {sorted(SHIFT_PRESETS)}")
        if self.n_rows < 10 or self.ood_rows < 1 or self.scr_per_cell < 2:
            raise ConfigError("eval set sizes are too small")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if any(len(p) != 2 or p[0] == p[1] for p in self.scr_pairs):
            raise ConfigError("scr_pairs must be pairs of distinct parent ids")
        return self

    def probe(self):
        return ProbeTrainConfig(self.probe_l2, self.probe_steps, self.probe_lr, self.train_fraction, self.seed)

    def absorption(self):
        return AbsorptionConfig(self.tau_main, self.tau_abs, self.tau_cos, self.k_max, self.eps)


@dataclass
class EvalData:
    in_dist: EvalSet
    scr: list = field(default_factory=list)  # ScrSet per pair (or an exception if sampling failed)
    shifted: dict = field(default_factory=dict)
    parents: tuple = ()


def _eval_set(batch, n_parents, n_children, is_train):
    names = [f"parent_{j}" for j in range(n_parents)]
    names += [f"child_{j}_{k}" for j in range(n_parents) for k in range(n_children)]
    names.append("neutral")
    return EvalSet(batch.x, batch.labels, is_train, names)


def _scr_set(model, hierarchy, gen_cfg, cfg, a, b):
    """Fill the four (A, B) cells by rejection from an unmasked row pool."""
    need = cfg.scr_per_cell
    cells = {(i, j): [] for i in (0, 1) for j in (0, 1)}
    chunk = 8192
    start = 0
    domain = f"eval-scr-{a}-{b}"
    while any(len(v) < need for v in cells.values()):
        if start >= cfg.scr_max_pool:
            short = {k: len(v) for k, v in cells.items()}
            raise SaeForgeError(f"SCR pair ({a},{b}): pool of {start} rows cannot fill cells {short}")
        batch = generate_rows(model, hierarchy, cfg.seed, domain, chunk, gen_cfg.seq_len, None, start)
        for i in (0, 1):
            for j in (0, 1):
                hit = np.flatnonzero((batch.labels[:, a] == i) & (batch.labels[:, b] == j))
                room = need - len(cells[i, j])
                cells[i, j].extend(batch.x[hit[:room]])
        start += chunk

    def stack(keys):
        x = np.concatenate([np.array(cells[k]) for k in keys])
        ya = np.concatenate([np.full(need, k[0], bool) for k in keys])
        yb = np.concatenate([np.full(need, k[1], bool) for k in keys])
        return x, ya, yb

    x_bias, a_bias, _ = stack([(0, 0), (1, 1)])
    x_bal, a_bal, b_bal = stack([(0, 0), (0, 1), (1, 0), (1, 1)])
    is_train = split_mask(len(x_bal), cfg.train_fraction, cfg.seed + 1)
    return ScrSet(x_bias, a_bias, x_bal, a_bal, b_bal, is_train, name=f"parent_{a}|parent_{b}")


def build_eval_data(gen_cfg, cfg=EvalConfig()):
    """Fresh unmasked evaluation data from the eval seed (never the training stream)."""
    cfg.validate()
    model, hierarchy = build_model(gen_cfg)
    P, C = gen_cfg.n_parents, gen_cfg.children_per_parent
    batch = generate_rows(model, hierarchy, cfg.seed, "eval", cfg.n_rows, gen_cfg.seq_len)
    in_dist = _eval_set(batch, P, C, split_mask(cfg.n_rows, cfg.train_fraction, cfg.seed))

    scr = []
    for a, b in cfg.scr_pairs:
        if max(a, b) >= P:
            raise ConfigError(f"scr pair ({a},{b}) names a parent beyond n_parents={P}")
        try:
            scr.append(_scr_set(model, hierarchy, gen_cfg, cfg, a, b))
        except SaeForgeError as exc:
            scr.append(exc)

    shifted = {}
    for name in cfg.shifts:
        m2, h2 = shift_distribution(model, hierarchy, SHIFT_PRESETS[name])
        b2 = generate_rows(m2, h2, cfg.seed, f"eval-ood-{name}", cfg.ood_rows, gen_cfg.seq_len)
        shifted[name] = _eval_set(b2, P, C, np.zeros(cfg.ood_rows, bool))
    return EvalData(in_dist, scr, shifted, tuple(range(P)))


def evaluate_all(sae, gen_cfg, cfg=EvalConfig(), data=None, provenance=None):
    """Run every metric; a failing metric is recorded under ``failures`` and left out of ``values``."""
    data = data or build_eval_data(gen_cfg, cfg)
    probe_cfg = cfg.probe()
    parents = list(data.parents)
    ev = data.in_dist
    values, diagnostics, failures = {}, {}, {}

    def run(name, fn):
        try:
            value, diag = fn()
        except (SaeForgeError, ValueError, ArithmeticError) as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
            return
        if not np.isfinite(value):
            failures[name] = f"non-finite value {value}"
            return
        values[name] = float(value)
        diagnostics[name] = diag

    def ev_metric():
        te = ~ev.is_train
        x = ev.x[te]
        return explained_variance(x, sae.reconstruct(x)), {"rows": int(te.sum())}

    def scr_metric():
        scores, diag = [], {}
        for s in data.scr:
            if isinstance(s, Exception):
                raise s
            v, d = scr_score(sae, s, cfg.k_scr, probe_cfg, cfg.eps)
            scores.append(v)
            diag[s.name] = d
        if not scores:
            raise ConfigError("no SCR pairs configured")
        return float(np.mean(scores)), diag

    run("absorption_free", lambda: absorption_free_score(sae, ev, parents, cfg.absorption(), probe_cfg))
    run("explained_variance", ev_metric)
    run("sparse_probing", lambda: sparse_probing_score(sae, ev, parents, cfg.k_list, probe_cfg))
    run("tpp", lambda: tpp_score(sae, ev, parents, cfg.k_tpp, probe_cfg))
    run("scr", scr_metric)
    run("ood_auc_sae", lambda: ood_probing(sae, ev, data.shifted, parents, probe_cfg))
    run("ood_auc_oracle", lambda: ood_probing(None, ev, data.shifted, parents, probe_cfg))

    prov = {
        "eval_config": asdict(cfg),
        "generator_config": asdict(gen_cfg),
        "metric_names": list(METRIC_NAMES),
    }
    prov.update(provenance or {})
    return MetricReport(values, prov, diagnostics, failures)
