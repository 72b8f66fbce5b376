"""Toy token model: hierarchical ground-truth features, co-occurrence,
token masking and context-mixed activations.

Feature ids are laid out as ``[parents | children | neutral]``: parent ``j``
is id ``j``, child ``k`` of parent ``j`` is ``n_parents + j * children + k``
and the mask token's neutral direction is the last id.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError

MASK_TOKEN_ID = 0


@dataclass(frozen=True)
class GeneratorConfig:
    d: int = 64
    n_parents: int = 8
    children_per_parent: int = 3
    vocab_size: int = 256
    seq_len: int = 64
    base_rate: float = 0.1
    p_child_given_parent: float = 0.3
    magnitude_lo: float = 0.5
    magnitude_hi: float = 1.5
    cooccur_rho: float = 0.5
    context_gamma: float = 0.25
    context_decay: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave at least one non-mask token")
        if self.d < 1 or self.n_parents < 1 or self.children_per_parent < 0 or self.seq_len < 1:
            raise ConfigError("generator sizes must be positive")
        _check_probabilities(
            base_rate=self.base_rate,
            p_child_given_parent=self.p_child_given_parent,
            cooccur_rho=self.cooccur_rho,
        )
        if not 0.0 <= self.context_decay < 1.0:
            raise ConfigError(f"context_decay must lie in [0, 1), got {self.context_decay}")
        if self.context_gamma < 0 or self.noise_sigma < 0:
            raise ConfigError("context_gamma and noise_sigma must be nonnegative")
        if not 0.0 <= self.magnitude_lo <= self.magnitude_hi:
            raise ConfigError("magnitude range must satisfy 0 <= lo <= hi")
        return self


def _check_probabilities(**values):
    for name, p in values.items():
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {p}")


def _frozen(a):
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FeatureHierarchy:
    n_parents: int
    children_per_parent: int
    directions: np.ndarray  # (n_features, D), unit rows
    base_rate: float
    p_child_given_parent: float
    magnitude_dist: tuple

    @property
    def n_children(self):
        return self.n_parents * self.children_per_parent

    @property
    def n_features(self):
        return self.n_parents + self.n_children + 1

    @property
    def neutral(self):
        return self.n_features - 1

    def child(self, parent, k):
        return self.n_parents + parent * self.children_per_parent + k

    @property
    def parent_of(self):
        """Parent id for every child id (index ``child - n_parents``)."""
        return np.repeat(np.arange(self.n_parents), self.children_per_parent)

    def is_closed(self, feats):
        """True when every active child has its parent active (per row)."""
        feats = np.asarray(feats, dtype=bool)
        kids = feats[:, self.n_parents : self.n_parents + self.n_children]
        return ~np.any(kids & ~feats[:, self.parent_of], axis=1)


@dataclass(frozen=True, eq=False)
class ToyTokenModel:
    vocab_size: int
    token_rank: np.ndarray  # (vocab, n_parents) priority of each token for each parent
    token_parents: np.ndarray  # (vocab, n_parents) bool, intrinsic parent map
    cooccur_rho: float
    context_gamma: float
    context_decay: float
    noise_sigma: float
    d: int
    mask_token_id: int = MASK_TOKEN_ID

    @property
    def token_feature_map(self):
        return {t: set(np.flatnonzero(self.token_parents[t]).tolist()) for t in range(self.vocab_size)}


@dataclass
class ActivationBatch:
    """Activation rows with their per-token metadata.

    ``labels`` is a boolean (rows, n_features) indicator of each token's own
    ground-truth features, or None for unlabeled data.
    """

    x: np.ndarray
    labels: np.ndarray = None
    mask_flags: np.ndarray = None
    sequence_id: np.ndarray = None
    position: np.ndarray = None
    partial: bool = False

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def concat(cls, batches):
        def cat(name):
            parts = [getattr(b, name) for b in batches]
            return None if any(p is None for p in parts) else np.concatenate(parts)

        return cls(cat("x"), cat("labels"), cat("mask_flags"), cat("sequence_id"), cat("position"))

    def take(self, index):
        def pick(a):
            return None if a is None else a[index]

        return ActivationBatch(
            self.x[index], pick(self.labels), pick(self.mask_flags), pick(self.sequence_id), pick(self.position)
        )


LabeledActivationBatch = ActivationBatch


def _parents_from_rank(rank, base_rate):
    # exact stratification: each parent owns round(base_rate * n_tokens) tokens
    n_tokens = rank.shape[0] - 1
    owned = rank < int(round(base_rate * n_tokens))
    owned[MASK_TOKEN_ID] = False
    return owned


def build_model(cfg=None):
    """Sample feature directions and the token map for ``cfg`` (deterministic in ``cfg.seed``)."""
    cfg = (cfg or GeneratorConfig()).validate()
    n_features = cfg.n_parents * (1 + cfg.children_per_parent) + 1
    dirs = rngmod.stream(cfg.seed, "directions").standard_normal((n_features, cfg.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hierarchy = FeatureHierarchy(
        n_parents=cfg.n_parents,
        children_per_parent=cfg.children_per_parent,
        directions=_frozen(dirs),
        base_rate=cfg.base_rate,
        p_child_given_parent=cfg.p_child_given_parent,
        magnitude_dist=(cfg.magnitude_lo, cfg.magnitude_hi),
    )
    g = rngmod.stream(cfg.seed, "token_map")
    rank = np.zeros((cfg.vocab_size, cfg.n_parents), dtype=np.int64)
    for j in range(cfg.n_parents):
        rank[1:, j] = np.argsort(g.permutation(cfg.vocab_size - 1))
    rank[MASK_TOKEN_ID] = cfg.vocab_size
    model = ToyTokenModel(
        vocab_size=cfg.vocab_size,
        token_rank=_frozen(rank),
        token_parents=_frozen(_parents_from_rank(rank, cfg.base_rate)),
        cooccur_rho=cfg.cooccur_rho,
        context_gamma=cfg.context_gamma,
        context_decay=cfg.context_decay,
        noise_sigma=cfg.noise_sigma,
        d=cfg.d,
    )
    return model, hierarchy


def sample_sequence(model, hierarchy, length, rng):
    """Draw token ids and each token's ground-truth feature indicators.

    A token carries its intrinsic parents; with probability ``cooccur_rho`` it
    also repeats every parent active on its left neighbour; finally each child
    of each active parent fires with ``p_child_given_parent``.
    """
    if length < 1:
        raise ConfigError("sequence length must be >= 1")
    if model.vocab_size < 2:
        raise ConfigError("vocabulary has no non-mask tokens")
    n_par, n_kids = hierarchy.n_parents, hierarchy.children_per_parent
    tokens = rng.integers(1, model.vocab_size, size=length)
    u_inherit = rng.random(length)
    u_child = rng.random((length, n_par, n_kids))

    parents = model.token_parents[tokens].copy()
    inherit = u_inherit < model.cooccur_rho
    for i in range(1, length):
        if inherit[i]:
            parents[i] |= parents[i - 1]

    feats = np.zeros((length, hierarchy.n_features), dtype=bool)
    feats[:, :n_par] = parents
    kids = (u_child < hierarchy.p_child_given_parent) & parents[:, :, None]
    feats[:, n_par : n_par + hierarchy.n_children] = kids.reshape(length, -1)
    return tokens, feats


def apply_mask(token_ids, p, rng, mask_token_id=MASK_TOKEN_ID):
    """Replace each position by ``mask_token_id`` independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"masking probability must lie in [0, 1], got {p}")
    token_ids = np.asarray(token_ids)
    omega = rng.random(token_ids.shape) < p
    return np.where(omega, mask_token_id, token_ids), omega


def mixing_matrix(length, gamma, decay):
    idx = np.arange(length)
    dist = np.abs(idx[:, None] - idx[None, :])
    mix = gamma * np.power(float(decay), dist)
    np.fill_diagonal(mix, 1.0)
    return mix


def contextual_activations(model, hierarchy, token_ids, feature_sets, rng, sequence_id=0):
    """Activations for one sequence.

    Each row is its own feature sum plus ``gamma * decay**|i-j|`` times every
    other position's feature sum, plus isotropic Gaussian noise. Rows whose
    token is the mask token carry only the neutral feature.
    """
    token_ids = np.asarray(token_ids)
    feats = np.array(feature_sets, dtype=bool)
    length = token_ids.shape[0]
    if feats.shape != (length, hierarchy.n_features):
        raise ConfigError(f"feature sets shape {feats.shape} != ({length}, {hierarchy.n_features})")
    masked = token_ids == model.mask_token_id
    feats[masked] = False
    feats[masked, hierarchy.neutral] = True

    lo, hi = hierarchy.magnitude_dist
    mags = rng.uniform(lo, hi, size=feats.shape)
    noise = rng.standard_normal((length, model.d))
    own = (feats * mags) @ hierarchy.directions
    x = mixing_matrix(length, model.context_gamma, model.context_decay) @ own + model.noise_sigma * noise
    return ActivationBatch(
        x=x.astype(np.float32),
        labels=feats,
        mask_flags=masked,
        sequence_id=np.full(length, sequence_id, dtype=np.uint64),
        position=np.arange(length, dtype=np.int64),
    )


def generate_sequence(model, hierarchy, seed, domain, index, length, p_mask=None):
    """One sequence's activations from its own (seed, domain, index) streams.

    ``p_mask=None`` is the unmasked path; it never touches the mask stream.
    """
    tokens, feats = sample_sequence(model, hierarchy, length, rngmod.stream(seed, domain, "sequence", index))
    if p_mask is not None:
        tokens, _ = apply_mask(tokens, p_mask, rngmod.stream(seed, domain, "mask", index), model.mask_token_id)
    act_rng = rngmod.stream(seed, domain, "activation", index)
    return contextual_activations(model, hierarchy, tokens, feats, act_rng, sequence_id=index)


def generate_rows(model, hierarchy, seed, domain, n_rows, seq_len, p_mask=None, start_row=0):
    """Rows ``[start_row, start_row + n_rows)`` of the infinite row stream of ``domain``."""
    if n_rows == 0:
        return ActivationBatch(
            np.zeros((0, model.d), np.float32),
            np.zeros((0, hierarchy.n_features), bool),
            np.zeros(0, bool),
            np.zeros(0, np.uint64),
            np.zeros(0, np.int64),
        )
    first = start_row // seq_len
    last = (start_row + n_rows - 1) // seq_len
    seqs = [generate_sequence(model, hierarchy, seed, domain, i, seq_len, p_mask) for i in range(first, last + 1)]
    offset = start_row - first * seq_len
    return ActivationBatch.concat(seqs).take(slice(offset, offset + n_rows))


_SHIFTABLE = ("cooccur_rho", "base_rate", "p_child_given_parent", "magnitude_dist", "noise_sigma")


def shift_distribution(model, hierarchy, shift_config):
    """Scale generator statistics by the multiplicative factors in ``shift_config``.

    Directions (the ground-truth concepts) are never changed.
    """
    unknown = set(shift_config) - set(_SHIFTABLE)
    if unknown:
        raise ConfigError(f"unknown shift keys {sorted(unknown)}; allowed: {_SHIFTABLE}")
    rho = model.cooccur_rho * shift_config.get("cooccur_rho", 1.0)
    base = hierarchy.base_rate * shift_config.get("base_rate", 1.0)
    pchild = hierarchy.p_child_given_parent * shift_config.get("p_child_given_parent", 1.0)
    _check_probabilities(cooccur_rho=rho, base_rate=base, p_child_given_parent=pchild)
    mag = shift_config.get("magnitude_dist", 1.0)
    lo, hi = hierarchy.magnitude_dist
    sigma = model.noise_sigma * shift_config.get("noise_sigma", 1.0)
    if sigma < 0 or mag < 0:
        raise ConfigError("noise and magnitude factors must be nonnegative")

    new_h = replace(hierarchy, base_rate=base, p_child_given_parent=pchild, magnitude_dist=(lo * mag, hi * mag))
    new_m = replace(model, cooccur_rho=rho, noise_sigma=sigma)
    if base != hierarchy.base_rate:
        new_m = replace(new_m, token_parents=_frozen(_parents_from_rank(model.token_rank, base)))
    return new_m, new_h


# Eight desk-scale distribution shifts, two per perturbed statistic.
SHIFT_PRESETS = {
    "rho_up": {"cooccur_rho": 1.6},
    "rho_down": {"cooccur_rho": 0.2},
    "base_rate_up": {"base_rate": 1.5},
    "base_rate_down": {"base_rate": 0.5},
    "magnitude_up": {"magnitude_dist": 1.5},
    "magnitude_down": {"magnitude_dist": 0.6},
    "noise_up": {"noise_sigma": 3.0},
    "noise_down": {"noise_sigma": 0.2},
}


def models_equal(a, b):
    """Field-by-field equality for model/hierarchy dataclasses holding arrays."""
    if type(a) is not type(b):
        return False
    for f in fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True
