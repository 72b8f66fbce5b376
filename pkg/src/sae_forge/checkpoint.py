"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    offset  size        field
    0       8           magic b"SAECKPT1"
    8       8           u64 header length H
    16      H           UTF-8 JSON header
    16+H    4*m*D       W_enc, row-major (m, D)
            4*m         b_enc
            4*D*m       W_dec, row-major (D, m)
            4*D         b_dec
            ...         Adam first moments (same four arrays), then second moments
            8*m         i64 step each latent last fired (only if header.has_fire_state)
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, HeaderMismatchError, TruncatedFileError
from .sae import AdamState, SaeParams, SparsityVariant

MAGIC = b"SAECKPT1"
VERSION = 1
_F32 = np.dtype("<f4")
_I64 = np.dtype("<i8")
_REQUIRED = ("version", "D", "m", "variant", "K", "group_sizes", "lambda", "normalize_decoder", "step", "rng_seed")


@dataclass
class Checkpoint:
    params: SaeParams
    adam: AdamState
    variant: SparsityVariant
    step: int = 0
    rng_seed: int = 0
    normalize_decoder: bool = True
    last_fired: np.ndarray = None

    def header(self):
        return {
            "version": VERSION,
            "D": self.params.d,
            "m": self.params.m,
            "variant": self.variant.tag,
            "K": self.variant.k,
            "group_sizes": list(self.variant.group_sizes),
            "lambda": self.variant.l1_coeff,
            "normalize_decoder": self.normalize_decoder,
            "step": self.step,
            "rng_seed": self.rng_seed,
            "adam": {
                "t": self.adam.t,
                "lr": self.adam.lr,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
            },
            "has_fire_state": self.last_fired is not None,
        }


def _shapes(d, m):
    return [(m, d), (m,), (d, m), (d,)]


def save_checkpoint(path, ckpt):
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    blocks = [*ckpt.params.arrays(), *ckpt.adam.m, *ckpt.adam.v]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for a in blocks:
            f.write(np.ascontiguousarray(a, dtype=_F32).tobytes())
        if ckpt.last_fired is not None:
            f.write(np.ascontiguousarray(ckpt.last_fired, dtype=_I64).tobytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_d=None, expect_m=None):
    """Read and validate a checkpoint; raises a ``FormatError`` subclass on any defect."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise BadMagicError(f"{path}: not a checkpoint (magic {data[:8]!r})")
        raise TruncatedFileError(f"{path}: file ends inside the fixed preamble", len(data))
    if data[:8] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {data[:8]!r})")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise TruncatedFileError(f"{path}: header runs past end of file", len(data))
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatchError(f"{path}: unreadable header: {exc}", 16) from exc
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise HeaderMismatchError(f"{path}: header lacks {missing}", 16)
    if header["version"] != VERSION:
        raise HeaderMismatchError(f"{path}: unsupported checkpoint version {header['version']}", 16)
    d, m = int(header["D"]), int(header["m"])
    if (expect_d is not None and d != expect_d) or (expect_m is not None and m != expect_m):
        raise HeaderMismatchError(f"{path}: checkpoint is D={d}, m={m}; expected D={expect_d}, m={expect_m}", 16)
    variant = SparsityVariant(header["variant"], int(header["K"]), tuple(header["group_sizes"]), float(header["lambda"]))
    try:
        variant.validate(m)
    except ValueError as exc:
        raise HeaderMismatchError(f"{path}: header inconsistent with m={m}: {exc}", 16) from exc

    shapes = _shapes(d, m) * 3
    has_fire = bool(header.get("has_fire_state", False))
    expected = 16 + hlen + sum(int(np.prod(s)) for s in shapes) * 4 + (8 * m if has_fire else 0)
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: payload truncated, expected {expected} bytes", len(data))
    if len(data) > expected:
        raise HeaderMismatchError(f"{path}: {len(data) - expected} trailing bytes beyond payload", expected)

    offset = 16 + hlen
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, _F32, n, offset).reshape(shape).astype(np.float32))
        offset += 4 * n
    last_fired = None
    if has_fire:
        last_fired = np.frombuffer(data, _I64, m, offset).astype(np.int64)
    adam_h = header.get("adam", {})
    adam = AdamState(
        arrays[4:8],
        arrays[8:12],
        t=int(adam_h.get("t", header["step"])),
        lr=float(adam_h.get("lr", 3e-4)),
        beta1=float(adam_h.get("beta1", 0.9)),
        beta2=float(adam_h.get("beta2", 0.999)),
        eps=float(adam_h.get("eps", 1e-8)),
    )
    return Checkpoint(
        params=SaeParams(*arrays[:4]),
        adam=adam,
        variant=variant,
        step=int(header["step"]),
        rng_seed=int(header["rng_seed"]),
        normalize_decoder=bool(header["normalize_decoder"]),
        last_fired=last_fired,
    )
