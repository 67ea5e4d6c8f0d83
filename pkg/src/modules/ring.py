"""Arithmetic in R_q = Z_q[X]/(X^N + 1) over an RNS modulus chain.

Residues are ``uint64`` rows, one per prime of the basis (primes stay below
2^62). Products are exact: the 128-bit high word comes from a 32-bit limb
split, constant multipliers (NTT twiddles, N^-1, q^-1) use Shoup's
precomputed quotient and pointwise products use Montgomery reduction with
R = 2^64. Every butterfly stage of the NTT is vectorised across all primes of
the basis, and across stacked elements when a caller batches them.

Slot order of the forward transform: output index k holds the evaluation of the
polynomial at psi^(2*bitrev(k) + 1), psi being the stored 2N-th root of unity.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from sympy import isprime

from .errors import ContractViolationError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

GAUSSIAN_SIGMA = 3.2
GAUSSIAN_BOUND = int(6 * GAUSSIAN_SIGMA)
MAX_MODULUS_BITS = 62

SampleKind = Literal["ternary", "gaussian", "uniform"]
Direction = Literal["forward", "inverse"]

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_INT64_SAFE = 1 << 62


def is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def bit_reverse(value: int, width: int) -> int:
    result = 0
    for _ in range(width):
        result = (result << 1) | (value & 1)
        value >>= 1
    return result


def generate_primes(degree: int, bit_sizes: Sequence[int], exclude: Iterable[int] = ()) -> List[int]:
    """Scan downward from 2**bits for distinct primes p with p = 1 (mod 2N).

    Deterministic for a given (degree, bit_sizes, exclude).
    """
    step = 2 * degree
    used = set(exclude)
    primes: List[int] = []
    for bits in bit_sizes:
        if (1 << bits) <= 2 * step:
            raise ContractViolationError(f"{bits}-bit primes are too small for ring degree {degree}")
        candidate = (1 << bits) - step + 1
        while candidate > step:
            if candidate not in used and isprime(candidate):
                break
            candidate -= step
        else:
            raise ContractViolationError(f"No {bits}-bit prime = 1 mod {step} found")
        used.add(candidate)
        primes.append(candidate)
    return primes


def find_root_of_unity(degree: int, prime: int) -> int:
    """Return psi with psi^(2N) = 1 and psi^N = -1 (mod prime)."""
    exponent = (prime - 1) // (2 * degree)
    for base in range(2, prime):
        psi = pow(base, exponent, prime)
        if pow(psi, degree, prime) == prime - 1:
            return psi
    raise ContractViolationError(f"No primitive {2 * degree}-th root of unity mod {prime}")


# --- word arithmetic ---------------------------------------------------------


def _mulhi(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """High 64 bits of the 128-bit product of two uint64 arrays."""
    a_lo, a_hi = a & _MASK32, a >> _SHIFT32
    b_lo, b_hi = b & _MASK32, b >> _SHIFT32
    lo_lo = a_lo * b_lo
    lo_hi = a_lo * b_hi
    hi_lo = a_hi * b_lo
    mid = (lo_lo >> _SHIFT32) + (lo_hi & _MASK32) + (hi_lo & _MASK32)
    return a_hi * b_hi + (lo_hi >> _SHIFT32) + (hi_lo >> _SHIFT32) + (mid >> _SHIFT32)


def _reduce_once(r: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.where(r >= q, r - q, r)


def _add_mod(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    return _reduce_once(a + b, q)


def _sub_mod(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.where(a >= b, a - b, a + q - b)


def _neg_mod(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.where(a == 0, a, q - a)


def _mul_shoup(a: np.ndarray, w: np.ndarray, w_shoup: np.ndarray, q: np.ndarray) -> np.ndarray:
    """a * w mod q for a constant w < q with w_shoup = floor(w * 2^64 / q)."""
    quotient = _mulhi(a, w_shoup)
    return _reduce_once(a * w - quotient * q, q)


def _mul_montgomery(a: np.ndarray, b: np.ndarray, q: np.ndarray, q_neg_inv: np.ndarray) -> np.ndarray:
    """a * b * 2^-64 mod q for a, b < q."""
    lo = a * b
    hi = _mulhi(a, b)
    m = lo * q_neg_inv
    r = hi + _mulhi(m, q) + (lo != 0).astype(np.uint64)
    return _reduce_once(r, q)


def _shoup_quotients(values: Sequence[int], prime: int) -> np.ndarray:
    return np.array([(v << 64) // prime for v in values], dtype=np.uint64)


def _as_column(values: Sequence[int]) -> np.ndarray:
    return np.array(list(values), dtype=np.uint64).reshape(-1, 1)


# --- tables ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrimeTables:
    prime: int
    psi: int
    psi_rev: np.ndarray
    psi_rev_shoup: np.ndarray
    psi_inv_rev: np.ndarray
    psi_inv_rev_shoup: np.ndarray
    degree_inv: int


def _build_tables(degree: int, prime: int) -> PrimeTables:
    psi = find_root_of_unity(degree, prime)
    psi_inv = pow(psi, -1, prime)
    width = degree.bit_length() - 1
    powers = [1] * degree
    inv_powers = [1] * degree
    for e in range(1, degree):
        powers[e] = powers[e - 1] * psi % prime
        inv_powers[e] = inv_powers[e - 1] * psi_inv % prime
    order = [bit_reverse(k, width) for k in range(degree)]
    psi_rev = [powers[e] for e in order]
    psi_inv_rev = [inv_powers[e] for e in order]
    return PrimeTables(
        prime=prime,
        psi=psi,
        psi_rev=np.array(psi_rev, dtype=np.uint64),
        psi_rev_shoup=_shoup_quotients(psi_rev, prime),
        psi_inv_rev=np.array(psi_inv_rev, dtype=np.uint64),
        psi_inv_rev_shoup=_shoup_quotients(psi_inv_rev, prime),
        degree_inv=pow(degree, -1, prime),
    )


@dataclass(frozen=True, eq=False)
class BasisTables:
    """Per-basis constant columns, shape (k, 1), and stacked twiddle rows, shape (k, N)."""

    primes: Tuple[int, ...]
    q: np.ndarray
    q_signed: np.ndarray
    q_neg_inv: np.ndarray
    r2: np.ndarray
    n_inv: np.ndarray
    n_inv_shoup: np.ndarray
    psi_rev: np.ndarray
    psi_rev_shoup: np.ndarray
    psi_inv_rev: np.ndarray
    psi_inv_rev_shoup: np.ndarray


@dataclass(frozen=True, eq=False)
class RingParams:
    """Ring degree, data prime chain and optional special (key-switching) primes.

    Immutable after construction; root tables are built once and per-basis
    stacks are cached on first use.
    """

    degree: int
    primes: Tuple[int, ...]
    special_primes: Tuple[int, ...] = ()
    tables: Tuple[PrimeTables, ...] = field(init=False, repr=False)
    _basis_cache: Dict[Tuple[int, ...], BasisTables] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if not is_power_of_two(self.degree) or self.degree < 2:
            raise ContractViolationError(f"Ring degree must be a power of two >= 2, got {self.degree}")
        all_primes = tuple(self.primes) + tuple(self.special_primes)
        if not self.primes:
            raise ContractViolationError("At least one data prime is required")
        if len(set(all_primes)) != len(all_primes):
            raise ContractViolationError("Modulus primes must be distinct")
        for p in all_primes:
            if p % (2 * self.degree) != 1:
                raise ContractViolationError(f"Prime {p} is not 1 mod {2 * self.degree}")
            if p.bit_length() > MAX_MODULUS_BITS:
                raise ContractViolationError(f"Prime {p} exceeds {MAX_MODULUS_BITS} bits")
            if not isprime(p):
                raise ContractViolationError(f"Modulus {p} is not prime")
        object.__setattr__(self, "primes", tuple(self.primes))
        object.__setattr__(self, "special_primes", tuple(self.special_primes))
        object.__setattr__(self, "tables", tuple(_build_tables(self.degree, p) for p in all_primes))
        logger.debug("Ring tables built for N=%d over %d primes", self.degree, len(all_primes))

    @property
    def all_primes(self) -> Tuple[int, ...]:
        return self.primes + self.special_primes

    @property
    def chain_length(self) -> int:
        return len(self.primes)

    def data_basis(self, level: Optional[int] = None) -> Tuple[int, ...]:
        level = self.chain_length if level is None else level
        if not 1 <= level <= self.chain_length:
            raise ContractViolationError(f"Level {level} outside 1..{self.chain_length}")
        return tuple(range(level))

    def extended_basis(self, level: Optional[int] = None) -> Tuple[int, ...]:
        special = tuple(range(self.chain_length, len(self.all_primes)))
        return self.data_basis(level) + special

    def moduli(self, basis: Sequence[int]) -> Tuple[int, ...]:
        primes = self.all_primes
        return tuple(primes[i] for i in basis)

    def basis_tables(self, basis: Sequence[int]) -> BasisTables:
        basis = tuple(basis)
        cached = self._basis_cache.get(basis)
        if cached is not None:
            return cached
        primes = self.moduli(basis)
        chosen = [self.tables[i] for i in basis]
        built = BasisTables(
            primes=primes,
            q=_as_column(primes),
            q_signed=np.array(primes, dtype=np.int64).reshape(-1, 1),
            q_neg_inv=_as_column((-pow(p, -1, 1 << 64)) % (1 << 64) for p in primes),
            r2=_as_column(pow(2, 128, p) for p in primes),
            n_inv=_as_column(t.degree_inv for t in chosen),
            n_inv_shoup=_as_column((t.degree_inv << 64) // t.prime for t in chosen),
            psi_rev=np.stack([t.psi_rev for t in chosen]),
            psi_rev_shoup=np.stack([t.psi_rev_shoup for t in chosen]),
            psi_inv_rev=np.stack([t.psi_inv_rev for t in chosen]),
            psi_inv_rev_shoup=np.stack([t.psi_inv_rev_shoup for t in chosen]),
        )
        self._basis_cache[basis] = built
        return built


class RingElem:
    """Polynomial held as one residue row per prime of its basis."""

    __slots__ = ("params", "residues", "basis", "is_ntt")

    def __init__(self, params: RingParams, residues: np.ndarray, basis: Sequence[int], is_ntt: bool = False):
        basis = tuple(basis)
        residues = np.asarray(residues, dtype=np.uint64)
        if residues.shape != (len(basis), params.degree):
            raise ContractViolationError(
                f"Residue array shape {residues.shape} does not match basis of {len(basis)} primes, N={params.degree}"
            )
        self.params = params
        self.residues = residues
        self.basis = basis
        self.is_ntt = is_ntt

    @property
    def level(self) -> int:
        return sum(1 for i in self.basis if i < self.params.chain_length)

    @property
    def moduli(self) -> Tuple[int, ...]:
        return self.params.moduli(self.basis)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingElem):
            return NotImplemented
        return (
            self.params is other.params
            and self.basis == other.basis
            and self.is_ntt == other.is_ntt
            and np.array_equal(self.residues, other.residues)
        )

    __hash__ = None

    def __repr__(self) -> str:
        domain = "ntt" if self.is_ntt else "coeff"
        return f"RingElem(N={self.params.degree}, basis={self.basis}, {domain})"


# --- construction ------------------------------------------------------------


def zero(params: RingParams, basis: Sequence[int], is_ntt: bool = False) -> RingElem:
    residues = np.zeros((len(basis), params.degree), dtype=np.uint64)
    return RingElem(params, residues, basis, is_ntt)


def _reduce_signed(values: np.ndarray, tab: BasisTables) -> np.ndarray:
    """Reduce an int64 coefficient row into every prime of the basis."""
    return np.mod(values[None, :], tab.q_signed).astype(np.uint64)


def from_integers(params: RingParams, coeffs: Sequence[int], basis: Sequence[int]) -> RingElem:
    """Reduce arbitrary (possibly negative or large) integer coefficients into the basis."""
    tab = params.basis_tables(basis)
    values = coeffs if isinstance(coeffs, np.ndarray) and coeffs.dtype == np.int64 else None
    if values is None:
        ints = [int(c) for c in coeffs]
        if len(ints) != params.degree:
            raise ContractViolationError(f"Expected {params.degree} coefficients, got {len(ints)}")
        if all(-_INT64_SAFE < v < _INT64_SAFE for v in ints):
            values = np.array(ints, dtype=np.int64)
        else:
            column = np.array(tab.primes, dtype=object).reshape(-1, 1)
            residues = (np.array(ints, dtype=object)[None, :] % column).astype(np.uint64)
            return RingElem(params, residues, basis, is_ntt=False)
    if values.shape != (params.degree,):
        raise ContractViolationError(f"Expected {params.degree} coefficients, got {values.shape[0]}")
    return RingElem(params, _reduce_signed(values, tab), basis, is_ntt=False)


def centered(values: np.ndarray, modulus) -> np.ndarray:
    """Map residues in [0, q) to (-q/2, q/2]."""
    return np.where(values > modulus // 2, values - modulus, values)


def to_integers(elem: RingElem) -> np.ndarray:
    """CRT-reconstruct centered integer coefficients (coefficient domain only).

    A single-prime element comes back as int64; wider bases as Python integers.
    """
    _require_coefficient(elem, "to_integers")
    moduli = elem.moduli
    if len(moduli) == 1:
        return centered(elem.residues[0].astype(np.int64), moduli[0])
    modulus = 1
    for q in moduli:
        modulus *= q
    weights = []
    for q in moduli:
        partial = modulus // q
        weights.append(partial * pow(partial, -1, q))
    weight_column = np.array(weights, dtype=object).reshape(-1, 1)
    combined = (elem.residues.astype(object) * weight_column).sum(axis=0) % modulus
    return centered(combined, modulus)


def sample_gaussian_coefficients(rng: np.random.Generator, count: int, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    """Rounded gaussian integers clipped to 6 sigma."""
    bound = int(6 * sigma)
    draws = np.rint(rng.normal(0.0, sigma, size=count))
    return np.clip(draws, -bound, bound).astype(np.int64)


def sample(
    kind: SampleKind,
    params: RingParams,
    rng: np.random.Generator,
    basis: Optional[Sequence[int]] = None,
) -> RingElem:
    """Draw a coefficient-domain ring element.

    ternary and gaussian draw one small integer polynomial and reduce it into
    every prime of the basis; uniform draws each residue row independently.
    """
    basis = params.data_basis() if basis is None else tuple(basis)
    n = params.degree
    if kind == "ternary":
        small = rng.integers(-1, 2, size=n, dtype=np.int64)
    elif kind == "gaussian":
        small = sample_gaussian_coefficients(rng, n)
    elif kind == "uniform":
        rows = [rng.integers(0, q, size=n, dtype=np.uint64) for q in params.moduli(basis)]
        return RingElem(params, np.stack(rows), basis)
    else:
        raise ContractViolationError(f"Unknown sample kind: {kind}")
    return from_integers(params, small, basis)


# --- transforms --------------------------------------------------------------


def _require_coefficient(elem: RingElem, op: str) -> None:
    if elem.is_ntt:
        raise ContractViolationError(f"{op} requires a coefficient-domain element")


def _forward_rows(a: np.ndarray, tab: BasisTables) -> np.ndarray:
    """Forward negacyclic NTT of a (batch, k, N) stack."""
    batch, k, n = a.shape
    q = tab.q.reshape(1, k, 1, 1)
    m, t = 1, n
    while m < n:
        t //= 2
        a = a.reshape(batch, k, m, 2 * t)
        w = tab.psi_rev[None, :, m:2 * m, None]
        w_shoup = tab.psi_rev_shoup[None, :, m:2 * m, None]
        u = a[..., :t]
        v = _mul_shoup(a[..., t:], w, w_shoup, q)
        a = np.concatenate((_add_mod(u, v, q), _sub_mod(u, v, q)), axis=3)
        m *= 2
    return a.reshape(batch, k, n)


def _inverse_rows(a: np.ndarray, tab: BasisTables) -> np.ndarray:
    """Inverse negacyclic NTT of a (batch, k, N) stack, N^-1 scaling included."""
    batch, k, n = a.shape
    q = tab.q.reshape(1, k, 1, 1)
    m, t = n, 1
    while m > 1:
        h = m // 2
        a = a.reshape(batch, k, h, 2 * t)
        w = tab.psi_inv_rev[None, :, h:m, None]
        w_shoup = tab.psi_inv_rev_shoup[None, :, h:m, None]
        u = a[..., :t]
        v = a[..., t:]
        a = np.concatenate((_add_mod(u, v, q), _mul_shoup(_sub_mod(u, v, q), w, w_shoup, q)), axis=3)
        t *= 2
        m = h
    return _mul_shoup(a.reshape(batch, k, n), tab.n_inv[None], tab.n_inv_shoup[None], tab.q[None])


def ntt_transform(elem: RingElem, direction: Direction) -> RingElem:
    """Negacyclic NTT (forward) or its inverse, including the N^-1 scaling."""
    params = elem.params
    tab = params.basis_tables(elem.basis)
    stacked = elem.residues[None, :, :]

    if direction == "forward":
        if elem.is_ntt:
            raise ContractViolationError("Forward NTT requires a coefficient-domain element")
        return RingElem(params, _forward_rows(stacked, tab)[0], elem.basis, is_ntt=True)

    if direction == "inverse":
        if not elem.is_ntt:
            raise ContractViolationError("Inverse NTT requires an NTT-domain element")
        return RingElem(params, _inverse_rows(stacked, tab)[0], elem.basis, is_ntt=False)

    raise ContractViolationError(f"Unknown NTT direction: {direction}")


def to_ntt(elem: RingElem) -> RingElem:
    return elem if elem.is_ntt else ntt_transform(elem, "forward")


def from_ntt(elem: RingElem) -> RingElem:
    return ntt_transform(elem, "inverse") if elem.is_ntt else elem


# --- arithmetic --------------------------------------------------------------


def _check_compatible(a: RingElem, b: RingElem, op: str) -> None:
    if a.params is not b.params and (
        a.params.degree != b.params.degree or a.params.all_primes != b.params.all_primes
    ):
        raise ContractViolationError(f"{op}: operands belong to different rings")
    if a.basis != b.basis:
        raise ContractViolationError(f"{op}: operand bases differ ({a.basis} vs {b.basis})")
    if a.is_ntt != b.is_ntt:
        raise ContractViolationError(f"{op}: operands are in different representations")


def ring_add(a: RingElem, b: RingElem) -> RingElem:
    _check_compatible(a, b, "ring_add")
    q = a.params.basis_tables(a.basis).q
    return RingElem(a.params, _add_mod(a.residues, b.residues, q), a.basis, a.is_ntt)


def ring_sub(a: RingElem, b: RingElem) -> RingElem:
    _check_compatible(a, b, "ring_sub")
    q = a.params.basis_tables(a.basis).q
    return RingElem(a.params, _sub_mod(a.residues, b.residues, q), a.basis, a.is_ntt)


def ring_neg(a: RingElem) -> RingElem:
    q = a.params.basis_tables(a.basis).q
    return RingElem(a.params, _neg_mod(a.residues, q), a.basis, a.is_ntt)


def ring_mul_scalar(a: RingElem, scalar: int) -> RingElem:
    """Multiply by an integer constant (valid in either representation)."""
    primes = a.moduli
    factors = [int(scalar) % p for p in primes]
    w = _as_column(factors)
    w_shoup = _as_column((f << 64) // p for f, p in zip(factors, primes))
    q = a.params.basis_tables(a.basis).q
    return RingElem(a.params, _mul_shoup(a.residues, w, w_shoup, q), a.basis, a.is_ntt)


def _pointwise(a: np.ndarray, b: np.ndarray, tab: BasisTables) -> np.ndarray:
    """Exact a * b mod q; the second Montgomery pass by R^2 cancels the R^-1 of the first."""
    partial = _mul_montgomery(a, b, tab.q, tab.q_neg_inv)
    return _mul_montgomery(partial, np.broadcast_to(tab.r2, partial.shape), tab.q, tab.q_neg_inv)


def ring_mul(a: RingElem, b: RingElem) -> RingElem:
    """Product mod (X^N + 1, q_i); NTT-domain inputs multiply pointwise."""
    _check_compatible(a, b, "ring_mul")
    tab = a.params.basis_tables(a.basis)
    if a.is_ntt:
        return RingElem(a.params, _pointwise(a.residues, b.residues, tab), a.basis, is_ntt=True)
    fa = ntt_transform(a, "forward")
    fb = ntt_transform(b, "forward")
    product = RingElem(a.params, _pointwise(fa.residues, fb.residues, tab), a.basis, is_ntt=True)
    return ntt_transform(product, "inverse")


def restrict(elem: RingElem, basis: Sequence[int]) -> RingElem:
    """Keep only the residue rows of ``basis`` (a subset of the element's basis)."""
    basis = tuple(basis)
    try:
        rows = [elem.basis.index(i) for i in basis]
    except ValueError as exc:
        raise ContractViolationError(f"Basis {basis} is not contained in {elem.basis}") from exc
    return RingElem(elem.params, elem.residues[rows, :], basis, elem.is_ntt)


def drop_last_prime(elem: RingElem) -> RingElem:
    if len(elem.basis) < 2:
        raise ContractViolationError("Cannot drop the only remaining prime")
    return restrict(elem, elem.basis[:-1])


def select_row(elem: RingElem, row: int) -> RingElem:
    """Copy of ``elem`` with every residue row except ``row`` set to zero."""
    residues = np.zeros_like(elem.residues)
    residues[row, :] = elem.residues[row, :]
    return RingElem(elem.params, residues, elem.basis, elem.is_ntt)


def _lift_centered(row: np.ndarray, source: int, tab: BasisTables) -> np.ndarray:
    """Centered value of a residue row mod ``source``, reduced into every prime of ``tab``."""
    reduced = row[None, :] % tab.q
    negative = row > np.uint64(source // 2)
    shift = _as_column(source % p for p in tab.primes)
    return np.where(negative[None, :], _sub_mod(reduced, shift, tab.q), reduced)


def lift_row(elem: RingElem, row: int, basis: Sequence[int]) -> RingElem:
    """Centered lift of one residue row into another basis (coefficient domain)."""
    _require_coefficient(elem, "lift_row")
    tab = elem.params.basis_tables(basis)
    return RingElem(elem.params, _lift_centered(elem.residues[row, :], elem.moduli[row], tab), basis, is_ntt=False)


def lift_rows_ntt(elem: RingElem, basis: Sequence[int]) -> np.ndarray:
    """Every residue row of ``elem`` lifted into ``basis`` and transformed: shape (rows, len(basis), N)."""
    _require_coefficient(elem, "lift_rows_ntt")
    tab = elem.params.basis_tables(basis)
    stack = np.stack([_lift_centered(elem.residues[r, :], q, tab) for r, q in enumerate(elem.moduli)])
    return _forward_rows(stack, tab)


def montgomery_form(elem: RingElem) -> np.ndarray:
    """Residues times 2^64 mod q, the operand form expected by ``inner_product_ntt``."""
    tab = elem.params.basis_tables(elem.basis)
    return _mul_montgomery(elem.residues, np.broadcast_to(tab.r2, elem.residues.shape), tab.q, tab.q_neg_inv)


def inner_product_ntt(params: RingParams, digits: np.ndarray, keys: np.ndarray, basis: Sequence[int]) -> RingElem:
    """Sum over i of digits[i] * keys[i] (NTT domain); ``keys`` must be in Montgomery form."""
    tab = params.basis_tables(basis)
    products = _mul_montgomery(digits, keys, tab.q[None], tab.q_neg_inv[None])
    acc = products[0]
    for term in products[1:]:
        acc = _add_mod(acc, term, tab.q)
    return RingElem(params, acc, basis, is_ntt=True)


def divide_and_drop_last(elem: RingElem) -> RingElem:
    """round(x / q_last) over the remaining primes (coefficient domain)."""
    _require_coefficient(elem, "divide_and_drop_last")
    if len(elem.basis) < 2:
        raise ContractViolationError("Cannot drop the only remaining prime")
    params = elem.params
    kept = elem.basis[:-1]
    tab = params.basis_tables(kept)
    q_last = elem.moduli[-1]
    last = _lift_centered(elem.residues[-1, :], q_last, tab)
    diff = _sub_mod(elem.residues[:-1, :], last, tab.q)
    inverses = [pow(q_last, -1, p) for p in tab.primes]
    w = _as_column(inverses)
    w_shoup = _as_column((v << 64) // p for v, p in zip(inverses, tab.primes))
    return RingElem(params, _mul_shoup(diff, w, w_shoup, tab.q), kept, is_ntt=False)


def schoolbook_negacyclic(a: Sequence[int], b: Sequence[int], modulus: int) -> List[int]:
    """O(N^2) reference product mod (X^N + 1, modulus)."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            if k < n:
                out[k] += a[i] * b[j]
            else:
                out[k - n] -= a[i] * b[j]
    return [c % modulus for c in out]
