"""Additive multi-key CKKS with public-key aggregation.

Every client encrypts under the *sum* of all public-key shares, so ciphertexts
stay two polynomials wide and homomorphic addition is plain ring addition.
Decryption needs one noise-flooded partial decryption per key holder:

    d0 + sum_i (d1 * s_i + flood_i)  ~=  encode(sum of payloads)

Only addition is supported; there is a single modulus level.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ring
from .errors import CapacityError, FormatError, InputError, ParameterError, ProtocolError
from .ring import RingParams, RingPoly

DEFAULT_DELTA = 2**40
MIN_DELTA = 2**20
MIN_RING_DIM = 16
# payload magnitude times client count the encoding must absorb without wrapping mod q
PAYLOAD_HEADROOM = 2**10

SERIAL_VERSION = 1


@dataclass(frozen=True)
class SchemeParams:
    ring: RingParams
    delta: int = DEFAULT_DELTA

    def __post_init__(self):
        if self.ring.n < MIN_RING_DIM:
            raise ParameterError(f"ring dimension must be >= {MIN_RING_DIM}, got {self.ring.n}")
        if not isinstance(self.delta, int) or not ring.is_power_of_two(self.delta):
            raise ParameterError(f"delta must be a power of two, got {self.delta!r}")
        if self.delta < MIN_DELTA:
            raise ParameterError(f"delta must be >= 2^20, got {self.delta}")
        if self.delta * PAYLOAD_HEADROOM >= self.ring.q // 4:
            raise ParameterError(
                f"delta 2^{self.delta.bit_length() - 1} leaves no headroom below q/4 "
                f"for q of {self.ring.q.bit_length()} bits"
            )

    @property
    def slots(self) -> int:
        return self.ring.n // 2

    @property
    def n(self) -> int:
        return self.ring.n


@dataclass(frozen=True)
class CommonReference:
    """Public parameters plus the shared uniform polynomial ``a``."""

    a: RingPoly
    params: SchemeParams

    def digest(self) -> bytes:
        return hashlib.sha256(serialize(self)).digest()


@dataclass(frozen=True)
class SecretKey:
    s: RingPoly
    client_id: int

    def __repr__(self) -> str:
        return f"SecretKey(client_id={self.client_id}, <redacted>)"


@dataclass(frozen=True)
class PublicKeyShare:
    b: RingPoly
    client_id: int


@dataclass(frozen=True)
class AggregatedPublicKey:
    b_sum: RingPoly
    contributor_ids: frozenset = field(default_factory=frozenset)

    def digest(self) -> bytes:
        return hashlib.sha256(serialize(self)).digest()


@dataclass(frozen=True)
class Ciphertext:
    d0: RingPoly
    d1: RingPoly
    slot_count: int


@dataclass(frozen=True)
class PartialDecryption:
    p: RingPoly
    client_id: int


def setup(
    n: int,
    q: int = ring.DEFAULT_Q,
    delta: int = DEFAULT_DELTA,
    sigma_err: float = ring.DEFAULT_SIGMA_ERR,
    sigma_flood: float | None = None,
    seed: int = 0,
) -> CommonReference:
    """Build the common reference deterministically from ``seed``."""
    if sigma_flood is None:
        sigma_flood = sigma_err * ring.DEFAULT_FLOOD_FACTOR
    rp = RingParams(n=n, q=q, sigma_err=sigma_err, sigma_flood=sigma_flood)
    params = SchemeParams(ring=rp, delta=delta)
    rng = np.random.default_rng([seed, 0x5E7])
    return CommonReference(a=ring.sample_uniform(rp, rng), params=params)


# --------------------------------------------------------------------------
# Encoding through the canonical embedding
# --------------------------------------------------------------------------
#
# Slot j (j < n/2) holds m(zeta^(2j+1)) for zeta = exp(i*pi/n); the remaining
# n/2 evaluation points are the complex conjugates, in reverse order. With that
# layout both directions are a twisted length-n FFT.


@lru_cache(maxsize=None)
def _twist(n: int) -> np.ndarray:
    return np.exp(1j * np.pi * np.arange(n) / n)


def encode(values, params: SchemeParams) -> RingPoly:
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    n, slots = params.n, params.slots
    if vals.size > slots:
        raise CapacityError(f"{vals.size} values exceed {slots} slots")
    if not np.all(np.isfinite(vals)):
        raise InputError("cannot encode non-finite values")
    z = np.zeros(n, dtype=np.complex128)
    z[: vals.size] = vals
    z[n - 1 : n - 1 - slots : -1] = np.conj(z[:slots])
    coeffs = (np.fft.fft(z) / n * np.conj(_twist(n))).real
    scaled = np.rint(coeffs * params.delta)
    q = params.ring.q
    return RingPoly(params.ring, [int(c) % q for c in scaled])


def decode(p: RingPoly, count: int, params: SchemeParams) -> np.ndarray:
    if count > params.slots or count < 0:
        raise CapacityError(f"cannot decode {count} values from {params.slots} slots")
    n = params.n
    c = np.array([float(v) for v in p.centered()])
    z = n * np.fft.ifft(c * _twist(n))
    return z[:count].real / params.delta


# --------------------------------------------------------------------------
# Keys, encryption, partial decryption
# --------------------------------------------------------------------------


def keygen(ref: CommonReference, client_id: int, rng: np.random.Generator):
    rp = ref.params.ring
    s = ring.sample_ternary(rp, rng)
    e = ring.sample_error(rp, rp.sigma_err, rng)
    b = ring.poly_sub(e, ring.poly_mul(s, ref.a))
    return SecretKey(s=s, client_id=client_id), PublicKeyShare(b=b, client_id=client_id)


def aggregate_pk(shares) -> AggregatedPublicKey:
    shares = list(shares)
    if not shares:
        raise InputError("no public-key shares to aggregate")
    ids = [s.client_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate public-key share from clients {sorted(ids)}")
    b_sum = ring.poly_sum(s.b for s in shares)
    return AggregatedPublicKey(b_sum=b_sum, contributor_ids=frozenset(ids))


def encrypt(values, pk: AggregatedPublicKey, ref: CommonReference, rng: np.random.Generator) -> Ciphertext:
    params = ref.params
    rp = params.ring
    m = encode(values, params)
    v = ring.sample_ternary(rp, rng)
    e0 = ring.sample_error(rp, rp.sigma_err, rng)
    e1 = ring.sample_error(rp, rp.sigma_err, rng)
    d0 = ring.poly_sum([ring.poly_mul(v, pk.b_sum), m, e0])
    d1 = ring.poly_add(ring.poly_mul(v, ref.a), e1)
    return Ciphertext(d0=d0, d1=d1, slot_count=params.slots)


def ct_add(cts) -> Ciphertext:
    cts = list(cts)
    if not cts:
        raise InputError("no ciphertexts to add")
    slot_counts = {c.slot_count for c in cts}
    if len(slot_counts) != 1:
        raise ParameterError(f"ciphertexts disagree on slot count: {sorted(slot_counts)}")
    return Ciphertext(
        d0=ring.poly_sum(c.d0 for c in cts),
        d1=ring.poly_sum(c.d1 for c in cts),
        slot_count=cts[0].slot_count,
    )


def partial_dec(ct: Ciphertext, sk: SecretKey, rng: np.random.Generator) -> PartialDecryption:
    rp = ct.d1.params
    flood = ring.sample_error(rp, rp.sigma_flood, rng)
    return PartialDecryption(p=ring.poly_add(ring.poly_mul(ct.d1, sk.s), flood), client_id=sk.client_id)


def merge(ct: Ciphertext, parts, m: int, expected_ids=None) -> RingPoly:
    """d0 plus every partial decryption; the result decodes to the payload sum.

    ``m`` is the number of key holders behind the aggregated key; pass
    ``expected_ids`` (e.g. ``pk.contributor_ids``) to also check identities.
    """
    parts = list(parts)
    ids = [p.client_id for p in parts]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate partial decryptions in {sorted(ids)}")
    if len(parts) != m:
        raise ProtocolError(f"expected {m} partial decryptions, got {len(parts)}")
    if expected_ids is not None and set(ids) != set(expected_ids):
        missing = sorted(set(expected_ids) - set(ids))
        extra = sorted(set(ids) - set(expected_ids))
        raise ProtocolError(f"partial decryptions mismatch: missing {missing}, unexpected {extra}")
    return ring.poly_sum([ct.d0] + [p.p for p in parts])


# --------------------------------------------------------------------------
# Binary serialization: u8 tag, u32 version, type fields, ring polynomials
# --------------------------------------------------------------------------

TAG_SECRET_KEY = 1
TAG_PUBLIC_SHARE = 2
TAG_AGG_PUBLIC_KEY = 3
TAG_CIPHERTEXT = 4
TAG_PARTIAL_DEC = 5
TAG_COMMON_REF = 6

_HEADER = struct.Struct("<BI")


def ciphertext_nbytes(n: int) -> int:
    return _HEADER.size + 4 + 2 * ring.poly_nbytes(n)


def partial_dec_nbytes(n: int) -> int:
    return _HEADER.size + 4 + ring.poly_nbytes(n)


def serialize(obj) -> bytes:
    if isinstance(obj, SecretKey):
        return _HEADER.pack(TAG_SECRET_KEY, SERIAL_VERSION) + struct.pack("<I", obj.client_id) + ring.poly_to_bytes(obj.s)
    if isinstance(obj, PublicKeyShare):
        return _HEADER.pack(TAG_PUBLIC_SHARE, SERIAL_VERSION) + struct.pack("<I", obj.client_id) + ring.poly_to_bytes(obj.b)
    if isinstance(obj, AggregatedPublicKey):
        ids = sorted(obj.contributor_ids)
        head = _HEADER.pack(TAG_AGG_PUBLIC_KEY, SERIAL_VERSION) + struct.pack(f"<I{len(ids)}I", len(ids), *ids)
        return head + ring.poly_to_bytes(obj.b_sum)
    if isinstance(obj, Ciphertext):
        return (
            _HEADER.pack(TAG_CIPHERTEXT, SERIAL_VERSION)
            + struct.pack("<I", obj.slot_count)
            + ring.poly_to_bytes(obj.d0)
            + ring.poly_to_bytes(obj.d1)
        )
    if isinstance(obj, PartialDecryption):
        return _HEADER.pack(TAG_PARTIAL_DEC, SERIAL_VERSION) + struct.pack("<I", obj.client_id) + ring.poly_to_bytes(obj.p)
    if isinstance(obj, CommonReference):
        rp = obj.params.ring
        fields = struct.pack("<IQIdd", rp.n, rp.q, obj.params.delta.bit_length() - 1, rp.sigma_err, rp.sigma_flood)
        return _HEADER.pack(TAG_COMMON_REF, SERIAL_VERSION) + fields + ring.poly_to_bytes(obj.a)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def deserialize(data, params: SchemeParams | None = None, expect: type | None = None):
    """Inverse of :func:`serialize`.

    ``params`` is required for everything except a CommonReference, which
    carries its own parameters.
    """
    view = memoryview(data)
    if len(view) < _HEADER.size:
        raise FormatError("truncated header")
    tag, version = _HEADER.unpack_from(view, 0)
    if version != SERIAL_VERSION:
        raise FormatError(f"unsupported serialization version {version}")
    off = _HEADER.size
    try:
        if tag == TAG_COMMON_REF:
            n, q, log_delta, sig_e, sig_f = struct.unpack_from("<IQIdd", view, off)
            off += struct.calcsize("<IQIdd")
            try:
                rp = RingParams(n=n, q=q, sigma_err=sig_e, sigma_flood=sig_f)
                sp = SchemeParams(ring=rp, delta=2**log_delta)
            except ParameterError as exc:
                raise FormatError(f"invalid reference parameters: {exc}") from exc
            a, off = ring.poly_from_bytes(view, rp, off)
            obj = CommonReference(a=a, params=sp)
        else:
            if params is None:
                raise InputError("scheme parameters are required to parse this object")
            rp = params.ring
            if tag in (TAG_SECRET_KEY, TAG_PUBLIC_SHARE, TAG_PARTIAL_DEC):
                (cid,) = struct.unpack_from("<I", view, off)
                poly, off = ring.poly_from_bytes(view, rp, off + 4)
                cls = {TAG_SECRET_KEY: SecretKey, TAG_PUBLIC_SHARE: PublicKeyShare, TAG_PARTIAL_DEC: PartialDecryption}[tag]
                obj = cls(poly, cid)
            elif tag == TAG_AGG_PUBLIC_KEY:
                (count,) = struct.unpack_from("<I", view, off)
                ids = struct.unpack_from(f"<{count}I", view, off + 4)
                poly, off = ring.poly_from_bytes(view, rp, off + 4 + 4 * count)
                obj = AggregatedPublicKey(b_sum=poly, contributor_ids=frozenset(ids))
            elif tag == TAG_CIPHERTEXT:
                (slots,) = struct.unpack_from("<I", view, off)
                d0, off = ring.poly_from_bytes(view, rp, off + 4)
                d1, off = ring.poly_from_bytes(view, rp, off)
                obj = Ciphertext(d0=d0, d1=d1, slot_count=slots)
            else:
                raise FormatError(f"unknown type tag {tag}")
    except struct.error as exc:
        raise FormatError(f"truncated payload: {exc}") from exc
    if off != len(view):
        raise FormatError(f"{len(view) - off} trailing bytes after {type(obj).__name__}")
    if expect is not None and not isinstance(obj, expect):
        raise FormatError(f"expected {expect.__name__}, got {type(obj).__name__}")
    return obj


def noise_std_estimate(params: SchemeParams, m: int) -> float:
    """Rough per-slot standard deviation of decoded noise after merging ``m`` partials."""
    return math.sqrt(params.n * m / 2) * params.ring.sigma_flood / params.delta
