"""SAE evaluation metrics built on one deterministic logistic probe.

All percentages follow the convention that higher is better. Absorption is
reported as the absorption-free score ``100 * (1 - rate)``.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, NumericError, SaeForgeError

METRIC_NAMES = (
    "absorption_free",
    "explained_variance",
    "sparse_probing",
    "tpp",
    "scr",
    "ood_auc_sae",
    "ood_auc_oracle",
)


class MetricError(SaeForgeError):
    pass


@dataclass(frozen=True)
class ProbeTrainConfig:
    l2: float = 1e-3
    steps: int = 500
    lr: float = 0.1
    train_fraction: float = 0.8
    split_seed: int = 0


@dataclass
class LinearProbe:
    weights: np.ndarray  # in the caller's raw feature space
    bias: float
    trained_on: str = "raw"
    heldout_accuracy: float = float("nan")

    @property
    def direction(self):
        norm = np.linalg.norm(self.weights)
        return self.weights / norm if norm > 0 else self.weights.copy()

    def decision(self, features):
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def predict(self, features):
        return self.decision(features) > 0

    def accuracy(self, features, labels):
        return float(np.mean(self.predict(features) == np.asarray(labels, dtype=bool)))


def split_mask(n, train_fraction, seed):
    """Boolean train mask with ``round(train_fraction * n)`` randomly chosen rows."""
    perm = np.random.default_rng(seed).permutation(n)
    is_train = np.zeros(n, dtype=bool)
    is_train[perm[: int(round(train_fraction * n))]] = True
    return is_train


def fit_probe(features, labels, cfg=ProbeTrainConfig(), trained_on="raw"):
    """L2-regularized logistic regression by full-batch gradient descent.

    Features are standardized on the training rows and the learned weights are
    mapped back, so ``LinearProbe.decision`` takes raw features. Rows outside
    the ``cfg.train_fraction`` split score ``heldout_accuracy``.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ConfigError(f"features have {X.shape[0]} rows but labels have {y.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise NumericError("probe features contain NaN or Inf")
    if cfg.train_fraction >= 1.0:
        is_train = np.ones(len(y), dtype=bool)
    else:
        is_train = split_mask(len(y), cfg.train_fraction, cfg.split_seed)
    Xt, yt = X[is_train], y[is_train]
    if yt.all() or not yt.any():
        raise MetricError("probe training split contains a single class")

    mean = Xt.mean(axis=0)
    std = Xt.std(axis=0)
    std[std < 1e-12] = 1.0
    Z = (Xt - mean) / std
    target = yt.astype(np.float64)
    n = Z.shape[0]
    w = np.zeros(Z.shape[1])
    b = 0.0
    for _ in range(cfg.steps):
        p = 0.5 * (1.0 + np.tanh(0.5 * (Z @ w + b)))
        err = p - target
        w -= cfg.lr * (Z.T @ err / n + cfg.l2 * w)
        b -= cfg.lr * err.mean()
    weights = w / std
    probe = LinearProbe(weights, float(b - weights @ mean), trained_on)
    if not np.all(np.isfinite(probe.weights)):
        raise NumericError("probe weights diverged")
    if (~is_train).any():
        probe.heldout_accuracy = probe.accuracy(X[~is_train], y[~is_train])
    return probe


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_score(pred, y):
    pred = np.asarray(pred, bool)
    y = np.asarray(y, bool)
    tp = np.sum(pred & y)
    denom = 2 * tp + np.sum(pred & ~y) + np.sum(~pred & y)
    return float(2 * tp / denom) if denom else 0.0


def explained_variance(x, x_hat):
    """Percent of variance around the column mean captured by ``x_hat``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ConfigError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.shape[0] < 2:
        raise ConfigError("explained variance needs at least two rows")
    total = np.sum((x - x.mean(axis=0)) ** 2)
    if total <= 0:
        raise MetricError("evaluation set has zero total variance")
    return float(100.0 * (1.0 - np.sum((x - x_hat) ** 2) / total))


@dataclass
class EvalSet:
    """Raw activations, binary concept labels (N, C) and a fixed train/held-out split."""

    x: np.ndarray
    labels: np.ndarray
    is_train: np.ndarray
    concept_names: list = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        self.is_train = np.asarray(self.is_train, dtype=bool)
        if self.concept_names is None:
            self.concept_names = [f"concept_{i}" for i in range(self.labels.shape[1])]


@dataclass(frozen=True)
class AbsorptionConfig:
    tau_main: float = 0.5
    tau_abs: float = 0.4
    tau_cos: float = 0.1
    k_max: int = 3
    eps: float = 1e-8


def _full(cfg):
    return replace(cfg, train_fraction=1.0)


def _has_both(y):
    return bool(y.any() and not y.all())


def _rank_desc(score):
    # descending, ties to the lower latent index
    return np.argsort(-score, kind="stable")


def sparse_probing_score(sae, data, concepts=None, k_list=(1, 2, 5), probe_cfg=ProbeTrainConfig()):
    """100 x mean over concepts of the best held-out accuracy of a top-k latent probe."""
    codes = sae.codes(data.x)
    tr, te = data.is_train, ~data.is_train
    accs = {}
    for c in range(data.labels.shape[1]) if concepts is None else concepts:
        y = data.labels[:, c]
        if not (_has_both(y[tr]) and _has_both(y[te])):
            warnings.warn(f"sparse probing: concept {data.concept_names[c]} is degenerate, skipped")
            continue
        diff = np.abs(codes[tr][y[tr]].mean(axis=0) - codes[tr][~y[tr]].mean(axis=0))
        order = _rank_desc(diff)
        best = 0.0
        for k in k_list:
            top = order[:k]
            probe = fit_probe(codes[tr][:, top], y[tr], _full(probe_cfg), "codes")
            best = max(best, probe.accuracy(codes[te][:, top], y[te]))
        accs[data.concept_names[c]] = best
    if not accs:
        raise MetricError("sparse probing: no usable concepts")
    return 100.0 * float(np.mean(list(accs.values()))), accs


def _main_latents(codes, y, tr, te, k_max, probe_cfg):
    diff = codes[tr][y[tr]].mean(axis=0) - codes[tr][~y[tr]].mean(axis=0)
    order = _rank_desc(diff)
    best_k, best_f1 = 1, -1.0
    for k in range(1, k_max + 1):
        top = order[:k]
        probe = fit_probe(codes[tr][:, top], y[tr], _full(probe_cfg), "codes")
        f1 = f1_score(probe.predict(codes[te][:, top]), y[te])
        if f1 > best_f1:
            best_k, best_f1 = k, f1
    return order[:best_k], best_f1


def absorption_events(codes, W_dec, direction, main, cfg=AbsorptionConfig()):
    """Classify rows of ``codes`` (all positives of one concept).

    Returns (represented, absorbed, total) per row, where ``total`` is the
    summed projection of active latents onto ``direction``.
    """
    atom_proj = W_dec.astype(np.float64).T @ direction  # (m,)
    proj = codes * atom_proj
    total = proj.sum(axis=1)
    denom = np.maximum(total, cfg.eps)
    is_main = np.zeros(codes.shape[1], dtype=bool)
    is_main[main] = True
    represented = proj[:, is_main].sum(axis=1) / denom >= cfg.tau_main
    norms = np.linalg.norm(W_dec.astype(np.float64), axis=0)
    cos = atom_proj / np.where(norms > 0, norms, 1.0)
    candidate = (codes > 0) & ~is_main & (cos >= cfg.tau_cos)
    absorbing = candidate & (proj / denom[:, None] >= cfg.tau_abs)
    absorbed = ~represented & absorbing.any(axis=1)
    return represented, absorbed, total


def absorption_free_score(sae, data, concepts, cfg=AbsorptionConfig(), probe_cfg=ProbeTrainConfig()):
    """Mean over ``concepts`` of ``100 * (1 - full absorption rate)``.

    The concept direction comes from a probe on raw activations; main latents
    are the top-k (k <= k_max) by train mean difference with the best held-out
    F1; held-out positives that the main latents fail to carry but a single
    aligned outside latent does are absorption events.
    """
    codes = sae.codes(data.x)
    W_dec = sae.params.W_dec
    tr, te = data.is_train, ~data.is_train
    per_concept = {}
    for c in concepts:
        y = data.labels[:, c]
        name = data.concept_names[c]
        if not (_has_both(y[tr]) and y[te].any()):
            raise MetricError(f"absorption: concept {name} lacks positives or negatives")
        probe = fit_probe(data.x[tr], y[tr], _full(probe_cfg), "raw")
        main, f1 = _main_latents(codes, y, tr, te, cfg.k_max, probe_cfg)
        pos = te & y
        _, absorbed, total = absorption_events(codes[pos], W_dec, probe.direction, main, cfg)
        if np.mean(total <= cfg.eps) > 0.5:
            raise MetricError(f"absorption: probe direction for {name} is not represented by active latents")
        rate = float(absorbed.mean())
        per_concept[name] = {
            "rate": rate,
            "score": 100.0 * (1.0 - rate),
            "main_latents": [int(i) for i in main],
            "main_f1": f1,
        }
    if not per_concept:
        raise MetricError("absorption: no concepts given")
    score = float(np.mean([v["score"] for v in per_concept.values()]))
    return score, per_concept


def attribute_latents(codes, y, direction, W_dec, k):
    """Top-``k`` latents by (mean code on - mean code off) x decoder projection."""
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    diff = codes[y].mean(axis=0) - codes[~y].mean(axis=0)
    score = diff * (W_dec.astype(np.float64).T @ direction)
    return _rank_desc(score)[:k]


def ablate(x, codes, W_dec, latents):
    """Subtract the chosen latents' decoded contributions from the raw activations."""
    x = np.asarray(x, dtype=np.float64)
    if len(latents) == 0:
        return x.copy()
    return x - codes[:, latents] @ W_dec[:, latents].astype(np.float64).T


def tpp_score(sae, data, classes, k_tpp=10, probe_cfg=ProbeTrainConfig(), attribute_from=None):
    """Targeted-minus-off-target probe accuracy drop (percent points) under latent ablation.

    ``attribute_from`` optionally maps a target class to the class whose
    latents are ablated for it (a mis-attribution control).
    """
    codes = sae.codes(data.x)
    W_dec = sae.params.W_dec
    tr, te = data.is_train, ~data.is_train
    usable = [c for c in classes if _has_both(data.labels[tr, c]) and _has_both(data.labels[te, c])]
    if len(usable) < 2:
        raise MetricError("TPP needs at least two usable classes")
    probes = {c: fit_probe(data.x[tr], data.labels[tr, c], _full(probe_cfg)) for c in usable}
    x_te, codes_te = data.x[te].astype(np.float64), codes[te]
    clean_acc = {c: probes[c].accuracy(x_te, data.labels[te, c]) for c in usable}
    terms = {}
    for c in usable:
        src = attribute_from.get(c, c) if attribute_from else c
        latents = attribute_latents(codes[tr], data.labels[tr, src], probes[src].direction, W_dec, k_tpp)
        x_abl = ablate(x_te, codes_te, W_dec, latents)
        delta = {
            c2: clean_acc[c2] - probes[c2].accuracy(x_abl, data.labels[te, c2]) for c2 in usable
        }
        off = np.mean([delta[c2] for c2 in usable if c2 != c])
        terms[data.concept_names[c]] = {"targeted": delta[c], "off_target": float(off), "latents": latents.tolist()}
    score = 100.0 * float(np.mean([t["targeted"] - t["off_target"] for t in terms.values()]))
    return score, terms


@dataclass
class ScrSet:
    """Biased subset (task A and spurious B perfectly correlated) and balanced subset."""

    x_biased: np.ndarray
    a_biased: np.ndarray
    x_balanced: np.ndarray
    a_balanced: np.ndarray
    b_balanced: np.ndarray
    balanced_is_train: np.ndarray
    name: str = "scr"


def scr_score(sae, data, k_scr=10, probe_cfg=ProbeTrainConfig(), eps=1e-8, ablate_concept="b"):
    """Normalized recovery of a biased probe after ablating latents of the spurious concept.

    ``ablate_concept="a"`` attributes the ablation to the task concept instead
    (a wrong-target control).
    """
    tr = np.asarray(data.balanced_is_train, dtype=bool)
    te = ~tr
    a_bal = np.asarray(data.a_balanced, bool)
    b_bal = np.asarray(data.b_balanced, bool)
    for name, y in (("A", a_bal[tr]), ("B", b_bal[tr]), ("A held-out", a_bal[te])):
        if not _has_both(y):
            raise MetricError(f"SCR: concept {name} is degenerate")
    x_te = np.asarray(data.x_balanced, dtype=np.float64)[te]
    base = fit_probe(data.x_biased, data.a_biased, _full(probe_cfg))
    oracle = fit_probe(data.x_balanced[tr], a_bal[tr], _full(probe_cfg))
    acc_base = base.accuracy(x_te, a_bal[te])
    acc_oracle = oracle.accuracy(x_te, a_bal[te])
    if acc_oracle <= acc_base:
        raise MetricError(
            f"SCR: oracle accuracy {acc_oracle:.4f} does not exceed biased accuracy {acc_base:.4f}; no bias to remove"
        )
    target = b_bal if ablate_concept == "b" else a_bal
    target_probe = fit_probe(data.x_balanced[tr], target[tr], _full(probe_cfg))
    codes = sae.codes(data.x_balanced)
    latents = attribute_latents(codes[tr], target[tr], target_probe.direction, sae.params.W_dec, k_scr)
    x_abl = ablate(x_te, codes[te], sae.params.W_dec, latents)
    acc_abl = base.accuracy(x_abl, a_bal[te])
    score = 100.0 * (acc_abl - acc_base) / max(acc_oracle - acc_base, eps)
    return score, {
        "acc_base": acc_base,
        "acc_oracle": acc_oracle,
        "acc_ablated": acc_abl,
        "latents": latents.tolist(),
    }


def ood_probing(sae, in_dist, shifted, concepts, probe_cfg=ProbeTrainConfig()):
    """Mean AUC on shifted sets of probes trained in-distribution.

    ``sae=None`` trains on raw activations (the oracle arm); otherwise on the
    SAE's codes. ``shifted`` maps shift name to an ``EvalSet``.
    """
    if not shifted:
        raise MetricError("OOD probing needs at least one shifted set")

    def feats(x):
        return np.asarray(x, dtype=np.float64) if sae is None else sae.codes(x)

    tr = in_dist.is_train
    f_id = feats(in_dist.x)
    shifted_feats = {name: feats(s.x) for name, s in shifted.items()}
    per_shift = {name: [] for name in shifted}
    for c in concepts:
        probe = fit_probe(f_id[tr], in_dist.labels[tr, c], _full(probe_cfg), "raw" if sae is None else "codes")
        for name, s in shifted.items():
            per_shift[name].append(auc(probe.decision(shifted_feats[name]), s.labels[:, c]))
    per_shift = {name: float(np.mean(v)) for name, v in per_shift.items()}
    return float(np.mean(list(per_shift.values()))), per_shift


@dataclass
class MetricReport:
    values: dict
    provenance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "metrics": {name: self.values.get(name) for name in METRIC_NAMES},
            "failures": self.failures,
            "provenance": self.provenance,
        }
