"""Magnitude masks, majority-vote consensus, and slot-aligned slicing."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, ParameterError, ProtocolError
from .model import Architecture, ModelParams


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray
    round: int = 0

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool).reshape(-1)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def param_count(self) -> int:
        return int(self.bits.size)

    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.round == other.round and np.array_equal(self.bits, other.bits)

    def __invert__(self) -> "Mask":
        return Mask(~self.bits, self.round)

    def to_bytes(self) -> bytes:
        """u32 param_count, u32 round, then the bitset packed little-endian per byte."""
        return struct.pack("<II", self.param_count, self.round) + np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data) -> "Mask":
        if len(data) < 8:
            raise FormatError("truncated mask header")
        count, rnd = struct.unpack_from("<II", data, 0)
        body = np.frombuffer(bytes(data[8:]), dtype=np.uint8)
        if len(body) != (count + 7) // 8:
            raise FormatError(f"mask body has {len(body)} bytes, expected {(count + 7) // 8}")
        bits = np.unpackbits(body, bitorder="little")
        if bits[count:].any():
            raise FormatError("non-zero padding bits in mask")
        return cls(bits[:count].astype(bool), rnd)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def __repr__(self):
        return f"Mask(param_count={self.param_count}, set={self.popcount()}, round={self.round})"


@dataclass(frozen=True)
class SliceSet:
    slices: tuple
    kept_count: int
    mask_digest: bytes

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(np.asarray(s, dtype=np.float64) for s in self.slices))

    def __len__(self) -> int:
        return len(self.slices)

    def payload(self) -> np.ndarray:
        if not self.slices:
            return np.zeros(0)
        return np.concatenate(self.slices)[: self.kept_count]


def top_k_count(kappa: float, weight_count: int) -> int:
    # rounding first keeps float noise (0.3 * 10 = 3.0000000000000004) from adding a weight
    return min(math.ceil(round(kappa * weight_count, 9)), weight_count)


def gen_mask(model: ModelParams, kappa: float, round: int = 0) -> Mask:
    """Keep the top ``kappa`` fraction of weights by |w| across the whole model, plus all biases.

    Ties at the cut-off go to the lower flat index.
    """
    if not 0 < kappa <= 1:
        raise ParameterError(f"kappa must be in (0, 1], got {kappa}")
    flat = model.flatten()
    if flat.size == 0:
        raise InputError("empty model")
    is_weight = model.arch.weight_positions
    weight_idx = np.flatnonzero(is_weight)
    keep = top_k_count(kappa, len(weight_idx))
    order = np.argsort(-np.abs(flat[weight_idx]), kind="stable")
    bits = ~is_weight
    bits[weight_idx[order[:keep]]] = True
    return Mask(bits, round)


def vote_masks(masks, round: int | None = None) -> Mask:
    """Bit k is set iff at least half of the masks set it."""
    masks = list(masks)
    if not masks:
        raise InputError("no masks to vote on")
    count = masks[0].param_count
    if any(mk.param_count != count for mk in masks):
        raise InputError("masks differ in length")
    votes = np.sum([mk.bits for mk in masks], axis=0)
    return Mask(2 * votes >= len(masks), masks[0].round if round is None else round)


def _check(model: ModelParams, mask: Mask) -> np.ndarray:
    flat = model.flatten()
    if flat.size != mask.param_count:
        raise InputError(f"mask covers {mask.param_count} parameters, model has {flat.size}")
    return flat


def apply_mask(model: ModelParams, mask: Mask) -> ModelParams:
    flat = _check(model, mask)
    return ModelParams.from_flat(model.arch, np.where(mask.bits, flat, 0.0))


def make_slices(model: ModelParams, mask: Mask, slots: int) -> SliceSet:
    """Pack surviving parameters in flat order into zero-padded vectors of length ``slots``."""
    if slots <= 0:
        raise ParameterError("slot count must be positive")
    flat = _check(model, mask)
    kept = flat[mask.bits]
    count = math.ceil(len(kept) / slots)
    padded = np.zeros(count * slots)
    padded[: len(kept)] = kept
    return SliceSet(tuple(padded.reshape(count, slots)), len(kept), mask.digest())


def reconstruct(slices: SliceSet, mask: Mask, arch: Architecture) -> ModelParams:
    """Scatter slice payloads back into a full model; masked-out positions are zero."""
    if slices.mask_digest != mask.digest():
        raise ProtocolError("slice set was built against a different mask")
    if mask.popcount() != slices.kept_count:
        raise ProtocolError(f"mask keeps {mask.popcount()} parameters, slices carry {slices.kept_count}")
    if mask.param_count != arch.param_count:
        raise ProtocolError(f"mask covers {mask.param_count} parameters, architecture has {arch.param_count}")
    payload = slices.payload()
    if payload.size != slices.kept_count:
        raise ProtocolError(f"slices hold {payload.size} values, expected {slices.kept_count}")
    flat = np.zeros(arch.param_count)
    flat[mask.bits] = payload
    return ModelParams.from_flat(arch, flat)
