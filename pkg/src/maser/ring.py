"""Arithmetic in the negacyclic ring R_q = Z_q[x]/(x^n + 1).

Coefficients are kept as exact Python integers inside read-only numpy object
arrays; 59-bit moduli overflow int64 products, and object arrays still let the
number-theoretic transform run stage-by-stage in vectorised form.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sympy import isprime

from .errors import FormatError, ParameterError

# 59-bit prime with q = 1 (mod 2^17): supports a negacyclic NTT for every n <= 2^16.
DEFAULT_Q = 576460752300015617
DEFAULT_SIGMA_ERR = 3.2
DEFAULT_FLOOD_FACTOR = 2**18

_TRUNCATION = 6.0


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class RingParams:
    """Ring dimension, modulus and the two noise widths."""

    n: int
    q: int = DEFAULT_Q
    sigma_err: float = DEFAULT_SIGMA_ERR
    sigma_flood: float = DEFAULT_SIGMA_ERR * DEFAULT_FLOOD_FACTOR

    def __post_init__(self):
        if not isinstance(self.n, int) or not is_power_of_two(self.n) or self.n < 2:
            raise ParameterError(f"ring dimension must be a power of two >= 2, got {self.n!r}")
        if self.q < 3 or not isprime(self.q):
            raise ParameterError(f"modulus {self.q} is not an odd prime")
        if self.q >= 2**64:
            raise ParameterError("modulus must fit in 64 bits for serialization")
        if (self.q - 1) % (2 * self.n):
            raise ParameterError(f"q = {self.q} is not 1 mod 2n = {2 * self.n}")
        if not self.sigma_err > 0:
            raise ParameterError("sigma_err must be positive")
        if self.sigma_flood < self.sigma_err:
            raise ParameterError("sigma_flood must be >= sigma_err")


class RingPoly:
    """Immutable element of R_q with coefficients in [0, q)."""

    __slots__ = ("params", "coeffs", "_ntt")

    def __init__(self, params: RingParams, coeffs):
        arr = np.empty(params.n, dtype=object)
        values = [int(c) for c in coeffs]
        if len(values) != params.n:
            raise ParameterError(f"expected {params.n} coefficients, got {len(values)}")
        arr[:] = [c % params.q for c in values]
        arr.flags.writeable = False
        self.params = params
        self.coeffs = arr
        self._ntt = None

    @classmethod
    def _wrap(cls, params: RingParams, arr: np.ndarray) -> "RingPoly":
        # arr must already be reduced mod q and owned by the caller
        poly = cls.__new__(cls)
        arr.flags.writeable = False
        poly.params = params
        poly.coeffs = arr
        poly._ntt = None
        return poly

    @classmethod
    def zero(cls, params: RingParams) -> "RingPoly":
        arr = np.empty(params.n, dtype=object)
        arr[:] = [0] * params.n
        return cls._wrap(params, arr)

    @classmethod
    def constant(cls, params: RingParams, c: int) -> "RingPoly":
        return cls(params, [c] + [0] * (params.n - 1))

    def centered(self) -> list[int]:
        """Signed representatives in (-q/2, q/2]."""
        q = self.params.q
        half = q // 2
        return [c - q if c > half else c for c in self.coeffs]

    def __len__(self) -> int:
        return self.params.n

    def __getitem__(self, i):
        return self.coeffs[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingPoly):
            return NotImplemented
        return self.params.n == other.params.n and self.params.q == other.params.q and bool(
            np.all(self.coeffs == other.coeffs)
        )

    def __hash__(self):
        return hash((self.params.n, self.params.q, tuple(self.coeffs)))

    def __repr__(self) -> str:
        head = ", ".join(str(c) for c in self.coeffs[:4])
        more = ", ..." if self.params.n > 4 else ""
        return f"RingPoly(n={self.params.n}, [{head}{more}])"

    def __add__(self, other: "RingPoly") -> "RingPoly":
        return poly_add(self, other)

    def __sub__(self, other: "RingPoly") -> "RingPoly":
        return poly_sub(self, other)

    def __neg__(self) -> "RingPoly":
        return poly_neg(self)

    def __mul__(self, other: "RingPoly") -> "RingPoly":
        return poly_mul(self, other)


def _check_same(a: RingPoly, b: RingPoly) -> None:
    if a.params.n != b.params.n or a.params.q != b.params.q:
        raise ParameterError(
            f"ring mismatch: (n={a.params.n}, q={a.params.q}) vs (n={b.params.n}, q={b.params.q})"
        )


def poly_add(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_same(a, b)
    return RingPoly._wrap(a.params, (a.coeffs + b.coeffs) % a.params.q)


def poly_sub(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_same(a, b)
    return RingPoly._wrap(a.params, (a.coeffs - b.coeffs) % a.params.q)


def poly_neg(a: RingPoly) -> RingPoly:
    return RingPoly._wrap(a.params, (-a.coeffs) % a.params.q)


def poly_sum(polys) -> RingPoly:
    polys = list(polys)
    if not polys:
        raise ParameterError("cannot sum an empty list of polynomials")
    acc = polys[0].coeffs.copy()
    for p in polys[1:]:
        _check_same(polys[0], p)
        acc = acc + p.coeffs
    return RingPoly._wrap(polys[0].params, acc % polys[0].params.q)


# --------------------------------------------------------------------------
# Number-theoretic transform
# --------------------------------------------------------------------------


class _NttTables:
    def __init__(self, n: int, q: int):
        self.n = n
        self.q = q
        psi = _primitive_root_2n(n, q)
        psi_inv = pow(psi, q - 2, q)
        omega = psi * psi % q
        omega_inv = pow(omega, q - 2, q)
        n_inv = pow(n, q - 2, q)

        self.psi_pows = _obj([pow(psi, i, q) for i in range(n)])
        # folds the 1/n of the inverse transform into the untwisting step
        self.psi_inv_pows = _obj([pow(psi_inv, i, q) * n_inv % q for i in range(n)])
        bits = n.bit_length() - 1
        self.bitrev = np.array([int(format(i, f"0{bits}b")[::-1], 2) if bits else 0 for i in range(n)])
        self.stages = _stage_twiddles(n, q, omega)
        self.inv_stages = _stage_twiddles(n, q, omega_inv)

    def _transform(self, a: np.ndarray, stages) -> np.ndarray:
        q = self.q
        a = a[self.bitrev]
        half = 1
        for w in stages:
            blocks = a.reshape(-1, 2 * half)
            u = blocks[:, :half]
            v = blocks[:, half:] * w % q
            a = np.concatenate(((u + v) % q, (u - v) % q), axis=1).reshape(-1)
            half *= 2
        return a

    def forward(self, coeffs: np.ndarray) -> np.ndarray:
        return self._transform(coeffs * self.psi_pows % self.q, self.stages)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return self._transform(values, self.inv_stages) * self.psi_inv_pows % self.q


def _obj(values) -> np.ndarray:
    arr = np.empty(len(values), dtype=object)
    arr[:] = values
    return arr


def _stage_twiddles(n: int, q: int, omega: int) -> list[np.ndarray]:
    out = []
    half = 1
    while half < n:
        step = pow(omega, n // (2 * half), q)
        out.append(_obj([pow(step, j, q) for j in range(half)]))
        half *= 2
    return out


def _primitive_root_2n(n: int, q: int) -> int:
    """Smallest-base element of exact multiplicative order 2n mod q."""
    exp = (q - 1) // (2 * n)
    for base in range(2, q):
        psi = pow(base, exp, q)
        # order divides 2n (a power of two); it is exactly 2n iff psi^n = -1
        if pow(psi, n, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive {2 * n}-th root of unity mod {q}")


@lru_cache(maxsize=None)
def ntt_tables(n: int, q: int) -> _NttTables:
    return _NttTables(n, q)


def _ntt_form(a: RingPoly) -> np.ndarray:
    if a._ntt is None:
        vals = ntt_tables(a.params.n, a.params.q).forward(a.coeffs)
        vals.flags.writeable = False
        a._ntt = vals
    return a._ntt


def poly_mul(a: RingPoly, b: RingPoly) -> RingPoly:
    """Negacyclic product via the NTT; forward transforms are cached on the operands."""
    _check_same(a, b)
    q = a.params.q
    tables = ntt_tables(a.params.n, q)
    prod = _ntt_form(a) * _ntt_form(b) % q
    return RingPoly._wrap(a.params, tables.inverse(prod))


def poly_mul_schoolbook(a: RingPoly, b: RingPoly) -> RingPoly:
    """O(n^2) negacyclic convolution; kept as an independent oracle for poly_mul."""
    _check_same(a, b)
    n, q = a.params.n, a.params.q
    full = np.convolve(a.coeffs, b.coeffs)
    low = full[:n].copy()
    low[: n - 1] -= full[n:]
    return RingPoly._wrap(a.params, low % q)


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------


def sample_uniform(params: RingParams, rng: np.random.Generator) -> RingPoly:
    vals = rng.integers(0, params.q, size=params.n, dtype=np.uint64)
    return RingPoly._wrap(params, _obj([int(v) for v in vals]))


def sample_small_ints(sigma: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Rounded centred Gaussian integers, rejecting draws beyond 6 sigma."""
    bound = math.floor(_TRUNCATION * sigma)
    out = np.rint(rng.normal(0.0, sigma, size=size))
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = np.rint(rng.normal(0.0, sigma, size=int(bad.sum())))
        bad = np.abs(out) > bound
    return out.astype(np.int64)


def sample_error(params: RingParams, sigma: float, rng: np.random.Generator) -> RingPoly:
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    vals = sample_small_ints(sigma, params.n, rng)
    q = params.q
    return RingPoly._wrap(params, _obj([int(v) % q for v in vals]))


def sample_ternary(params: RingParams, rng: np.random.Generator) -> RingPoly:
    vals = rng.integers(-1, 2, size=params.n)
    q = params.q
    return RingPoly._wrap(params, _obj([int(v) % q for v in vals]))


# --------------------------------------------------------------------------
# Serialization: u32 n, then n little-endian u64 coefficients
# --------------------------------------------------------------------------


def poly_to_bytes(a: RingPoly) -> bytes:
    body = np.array(a.coeffs.tolist(), dtype="<u8").tobytes()
    return struct.pack("<I", a.params.n) + body


def poly_nbytes(n: int) -> int:
    return 4 + 8 * n


def poly_from_bytes(data, params: RingParams, offset: int = 0) -> tuple[RingPoly, int]:
    """Parse one polynomial at ``offset``; returns it with the next offset."""
    view = memoryview(data)
    if len(view) - offset < 4:
        raise FormatError("truncated polynomial header")
    (n,) = struct.unpack_from("<I", view, offset)
    if n != params.n:
        raise FormatError(f"polynomial has n={n}, expected {params.n}")
    end = offset + 4 + 8 * n
    if len(view) < end:
        raise FormatError("truncated polynomial body")
    vals = np.frombuffer(view[offset + 4 : end], dtype="<u8")
    if n and int(vals.max()) >= params.q:
        raise FormatError("coefficient not reduced mod q")
    return RingPoly._wrap(params, _obj([int(v) for v in vals])), end
