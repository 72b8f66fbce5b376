"""Sparse autoencoder forward pass, hand-derived gradients and Adam.

Parameters are stored as float32; every forward/backward computation is done
in float64 and only the results are cast back down, so reductions do not
depend on batch layout.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

VARIANTS = ("ReluL1", "TopK", "BatchTopK", "MatryoshkaBatchTopK")

# columns already this close to unit norm are left bit-for-bit untouched
_NORM_TOL = 1e-6


@dataclass(frozen=True)
class SparsityVariant:
    """Which sparsity nonlinearity the SAE uses and its budget.

    ``k`` is the per-sample active-latent target (the l0 level). ``group_sizes``
    lists the Matryoshka prefix lengths and must end at the dictionary size.
    ``l1_coeff`` is only read by ``ReluL1``.
    """

    tag: str = "MatryoshkaBatchTopK"
    k: int = 8
    group_sizes: tuple = ()
    l1_coeff: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))

    def validate(self, m):
        if self.tag not in VARIANTS:
            raise ConfigError(f"unknown sparsity variant {self.tag!r}; expected one of {VARIANTS}")
        if self.l1_coeff < 0:
            raise ConfigError("l1_coeff must be nonnegative")
        if self.tag != "ReluL1":
            if self.k < 1:
                raise ConfigError(f"k must be positive, got {self.k}")
            if self.k > m:
                raise ConfigError(f"k={self.k} exceeds dictionary size m={m}")
        if self.tag == "MatryoshkaBatchTopK":
            validate_group_sizes(self.group_sizes, m)
        return self


def validate_group_sizes(group_sizes, m):
    gs = list(group_sizes)
    if not gs:
        raise ConfigError("Matryoshka group_sizes must be nonempty")
    if any(g <= 0 for g in gs) or any(b <= a for a, b in zip(gs, gs[1:])):
        raise ConfigError(f"group_sizes must be positive and strictly increasing: {gs}")
    if gs[-1] != m:
        raise ConfigError(f"last group size must equal m={m}, got {gs[-1]}")


@dataclass
class SaeParams:
    W_enc: np.ndarray  # (m, D)
    b_enc: np.ndarray  # (m,)
    W_dec: np.ndarray  # (D, m), columns are dictionary atoms
    b_dec: np.ndarray  # (D,)

    def __post_init__(self):
        m, d = self.W_enc.shape
        if self.b_enc.shape != (m,) or self.W_dec.shape != (d, m) or self.b_dec.shape != (d,):
            raise DimensionError(
                f"inconsistent SAE shapes: W_enc {self.W_enc.shape}, b_enc {self.b_enc.shape}, "
                f"W_dec {self.W_dec.shape}, b_dec {self.b_dec.shape}"
            )

    @property
    def d(self):
        return self.W_enc.shape[1]

    @property
    def m(self):
        return self.W_enc.shape[0]

    def arrays(self):
        return (self.W_enc, self.b_enc, self.W_dec, self.b_dec)

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*arrays)

    def copy(self):
        return SaeParams(*(a.copy() for a in self.arrays()))

    def astype(self, dtype):
        return SaeParams(*(a.astype(dtype) for a in self.arrays()))


# Gradients have exactly the parameter layout.
GradientSet = SaeParams


@dataclass
class SparseCodes:
    values: np.ndarray  # (B, m), nonnegative
    active_mask: np.ndarray  # (B, m) bool

    @property
    def n_active(self):
        return int(self.active_mask.sum())


@dataclass
class LossParts:
    recon: float
    sparsity: float = 0.0
    aux: float = 0.0

    @property
    def total(self):
        return self.recon + self.sparsity + self.aux

    def as_dict(self):
        return {"recon": self.recon, "sparsity": self.sparsity, "aux": self.aux, "total": self.total}


def _check_input(params, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != params.d:
        raise DimensionError(f"expected input of shape (B>=1, {params.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input activations contain NaN or Inf")
    return x.astype(np.float64)


def encode_pre(params, x):
    """Encoder pre-activations ``x @ W_enc.T + b_enc`` (no nonlinearity), float64."""
    x = _check_input(params, x)
    return x @ params.W_enc.T.astype(np.float64) + params.b_enc.astype(np.float64)


def _topk_rows(relu, k):
    # stable sort on the negated values: equal values keep ascending latent order
    order = np.argsort(-relu, axis=1, kind="stable")[:, :k]
    mask = np.zeros(relu.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask & (relu > 0)


def _topk_batch(relu, n_keep):
    positive = relu > 0
    if positive.sum() <= n_keep:
        return positive
    flat = relu.ravel()
    cut = flat.size - n_keep
    thresh = np.partition(flat, cut)[cut]
    mask = flat > thresh
    need = n_keep - int(mask.sum())
    if need > 0:
        ties = np.flatnonzero(flat == thresh)
        rows, cols = np.divmod(ties, relu.shape[1])
        mask[ties[np.lexsort((rows, cols))[:need]]] = True
    return mask.reshape(relu.shape)


def apply_sparsity(pre, variant):
    """Select active latents from pre-activations.

    TopK keeps the ``k`` largest positive entries of each row; BatchTopK and
    MatryoshkaBatchTopK keep the ``k * B`` largest positive entries of the
    whole batch. Ties go to the lower latent index (then the lower row).
    """
    pre = np.asarray(pre, dtype=np.float64)
    if pre.ndim != 2:
        raise DimensionError(f"pre-activations must be 2-D, got shape {pre.shape}")
    if not np.all(np.isfinite(pre)):
        raise NumericError("pre-activations contain NaN or Inf")
    variant.validate(pre.shape[1])
    relu = np.maximum(pre, 0.0)
    if variant.tag == "ReluL1":
        mask = pre > 0
    elif variant.tag == "TopK":
        mask = _topk_rows(relu, variant.k)
    else:
        mask = _topk_batch(relu, variant.k * pre.shape[0])
    return SparseCodes(np.where(mask, relu, 0.0), mask)


def decode(params, codes):
    values = np.asarray(codes.values if isinstance(codes, SparseCodes) else codes, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != params.m:
        raise DimensionError(f"codes must have shape (B, {params.m}), got {values.shape}")
    return values @ params.W_dec.T.astype(np.float64) + params.b_dec.astype(np.float64)


def encode(params, x, variant):
    return apply_sparsity(encode_pre(params, x), variant)


def _matryoshka_terms(W_dec, b_dec, c, x, group_sizes, want_grads=True):
    b, _ = x.shape
    n_groups = len(group_sizes)
    partial = np.broadcast_to(b_dec, x.shape).copy()
    loss = 0.0
    dW_dec = np.zeros_like(W_dec) if want_grads else None
    db_dec = np.zeros_like(b_dec) if want_grads else None
    dc = np.zeros_like(c) if want_grads else None
    prev = 0
    for size in group_sizes:
        partial += c[:, prev:size] @ W_dec[:, prev:size].T
        r = partial - x
        loss += np.einsum("ij,ij->", r, r) / b
        if want_grads:
            g = (2.0 / (n_groups * b)) * r
            dW_dec[:, :size] += g.T @ c[:, :size]
            db_dec += g.sum(axis=0)
            dc[:, :size] += g @ W_dec[:, :size]
        prev = size
    return loss / n_groups, dc, dW_dec, db_dec


def matryoshka_loss(params, codes, x, group_sizes):
    """Mean over nested prefixes of the prefix-only reconstruction error."""
    validate_group_sizes(group_sizes, params.m)
    x = _check_input(params, x)
    values = codes.values if isinstance(codes, SparseCodes) else np.asarray(codes)
    loss, *_ = _matryoshka_terms(
        params.W_dec.astype(np.float64),
        params.b_dec.astype(np.float64),
        values.astype(np.float64),
        x,
        group_sizes,
        want_grads=False,
    )
    return float(loss)


def _check_term(name, value):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name} loss ({value})")
    return float(value)


def loss_and_grads(params, x, variant, *, codes=None, dead_mask=None, aux_k=None, aux_coeff=1.0 / 32):
    """Batch loss parts and exact straight-through gradients.

    The active set (from ``apply_sparsity`` unless ``codes`` is supplied) is a
    constant during backprop. When ``dead_mask`` marks any latents, an
    auxiliary term asks the top ``aux_k`` dead pre-activations of each row to
    reconstruct the (detached) main residual.
    """
    x64 = _check_input(params, x)
    W_enc, b_enc, W_dec, b_dec = (a.astype(np.float64) for a in params.arrays())
    variant.validate(params.m)
    pre = x64 @ W_enc.T + b_enc
    if codes is None:
        codes = apply_sparsity(pre, variant)
    mask = codes.active_mask
    c = np.where(mask, pre, 0.0)
    b = x64.shape[0]

    if variant.tag == "MatryoshkaBatchTopK":
        recon, dc, dW_dec, db_dec = _matryoshka_terms(W_dec, b_dec, c, x64, variant.group_sizes)
        x_hat = c @ W_dec.T + b_dec
    else:
        x_hat = c @ W_dec.T + b_dec
        r = x_hat - x64
        recon = np.einsum("ij,ij->", r, r) / b
        g = (2.0 / b) * r
        dW_dec = g.T @ c
        db_dec = g.sum(axis=0)
        dc = g @ W_dec
    parts = LossParts(_check_term("reconstruction", recon))

    if variant.tag == "ReluL1" and variant.l1_coeff > 0:
        parts.sparsity = _check_term("sparsity", variant.l1_coeff * c.sum() / b)
        dc = dc + (variant.l1_coeff / b) * mask

    dpre = dc * mask

    if dead_mask is not None and aux_coeff > 0 and np.any(dead_mask):
        dead = np.flatnonzero(dead_mask)
        k_aux = min(aux_k or variant.k or 1, dead.size)
        aux_mask = _topk_rows(np.maximum(pre[:, dead], 0.0), k_aux)
        c_aux = np.where(aux_mask, pre[:, dead], 0.0)
        target = x64 - x_hat
        ra = c_aux @ W_dec[:, dead].T - target
        parts.aux = _check_term("auxiliary", aux_coeff * np.einsum("ij,ij->", ra, ra) / b)
        ga = (2.0 * aux_coeff / b) * ra
        dW_dec[:, dead] += ga.T @ c_aux
        dpre[:, dead] += (ga @ W_dec[:, dead]) * aux_mask

    dW_enc = dpre.T @ x64
    db_enc = dpre.sum(axis=0)
    grads = GradientSet(*(a.astype(np.float32) for a in (dW_enc, db_enc, dW_dec, db_dec)))
    return parts, grads


def normalize_decoder(W_dec):
    """Rescale each dictionary column to unit norm (idempotent)."""
    norms = np.sqrt(np.einsum("ij,ij->j", W_dec.astype(np.float64), W_dec.astype(np.float64)))
    fix = (np.abs(norms - 1.0) > _NORM_TOL) & (norms > 0)
    if not fix.any():
        return W_dec.copy()
    out = W_dec.copy()
    out[:, fix] = (W_dec[:, fix].astype(np.float64) / norms[fix]).astype(W_dec.dtype)
    return out


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **hyper):
        if isinstance(arrays, SaeParams):
            arrays = arrays.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_update(arrays, grads, state):
    """Bias-corrected Adam on a sequence of arrays; returns new arrays and state."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = np.asarray(g, dtype=np.float64)
        m1 = state.beta1 * m.astype(np.float64) + (1.0 - state.beta1) * g
        v1 = state.beta2 * v.astype(np.float64) + (1.0 - state.beta2) * g * g
        step = state.lr * (m1 / bc1) / (np.sqrt(v1 / bc2) + state.eps)
        p1 = (p.astype(np.float64) - step).astype(p.dtype)
        m1 = m1.astype(m.dtype)
        v1 = v1.astype(v.dtype)
        if not (np.all(np.isfinite(p1)) and np.all(np.isfinite(m1)) and np.all(np.isfinite(v1))):
            raise NumericError(f"non-finite Adam update at step {t}")
        new_p.append(p1)
        new_m.append(m1)
        new_v.append(v1)
    return new_p, replace(state, m=new_m, v=new_v, t=t)


def adam_step(params, grads, state, normalize=True):
    arrays, state = adam_update(params.arrays(), grads.arrays(), state)
    params = SaeParams.from_arrays(arrays)
    if normalize:
        params.W_dec = normalize_decoder(params.W_dec)
    return params, state


@dataclass
class SparseAutoencoder:
    """Parameters bundled with the sparsity rule used to encode."""

    params: SaeParams
    variant: SparsityVariant

    def encode(self, x):
        return encode(self.params, x, self.variant)

    def codes(self, x):
        return self.encode(x).values

    def reconstruct(self, x):
        return decode(self.params, self.encode(x))
