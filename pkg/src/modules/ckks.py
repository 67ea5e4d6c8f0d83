"""Leveled CKKS over the RNS ring of ``modules.ring``.

Levels count active data primes: a fresh ciphertext sits at the top level
(``len(coeff_modulus_bits)``) and every rescale drops the last active prime, so
a fresh ciphertext admits ``len(coeff_modulus_bits) - 1`` sequential
multiplications. Key switching uses one extra special prime outside the chain
and one decomposition digit per chain prime.

Ciphertext components are stored in the coefficient domain; NTT forms are
produced on demand inside multiplications.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from . import ring
from .errors import (
    AlignmentError,
    CapacityError,
    ContractViolationError,
    CorruptionError,
    DepthBudgetError,
    EncodingRangeError,
    LevelError,
    RelinearizationRequiredError,
)
from .ring import RingElem, RingParams

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# Maximum total modulus bits (special prime included) for 128-bit RLWE security
# with a ternary secret.
SECURITY_TABLE_128 = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}

MAX_PRIME_BITS = 61
MIN_PRIME_BITS = 20
SCALE_RTOL = 1e-9
ALIGN_SCALE_RTOL = 1e-3

Profile = Literal["secure", "test-insecure"]


class CkksParams(BaseModel):
    """Polynomial modulus degree, coefficient modulus sizes and scaling factor."""

    model_config = ConfigDict(frozen=True)

    poly_degree: int = 32768
    coeff_modulus_bits: Tuple[int, ...] = (60,) + (40,) * 11 + (60,)
    scale_bits: int = 40
    profile: Profile = "secure"

    @field_validator("poly_degree")
    @classmethod
    def _degree_power_of_two(cls, value: int) -> int:
        if not ring.is_power_of_two(value) or value < 4:
            raise ValueError(f"poly_degree must be a power of two >= 4, got {value}")
        return value

    @field_validator("coeff_modulus_bits")
    @classmethod
    def _bits_in_range(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("coeff_modulus_bits must not be empty")
        for bits in value:
            if not MIN_PRIME_BITS <= bits <= MAX_PRIME_BITS - 1:
                raise ValueError(f"prime sizes must lie in [{MIN_PRIME_BITS}, {MAX_PRIME_BITS - 1}], got {bits}")
        return tuple(value)

    @model_validator(mode="after")
    def _check_security(self) -> "CkksParams":
        if self.scale_bits >= self.coeff_modulus_bits[0]:
            raise ValueError("scale_bits must be smaller than the first coefficient modulus size")
        if self.profile == "secure":
            limit = SECURITY_TABLE_128.get(self.poly_degree)
            if limit is None:
                raise ValueError(f"No 128-bit security bound for poly_degree={self.poly_degree}")
            if self.total_bits > limit:
                raise ValueError(
                    f"Total modulus {self.total_bits} bits exceeds the 128-bit bound {limit} for N={self.poly_degree}"
                )
        return self

    @classmethod
    def secure(cls) -> "CkksParams":
        return cls()

    @classmethod
    def test_insecure(cls, depth: Optional[int] = None, poly_degree: int = 8192, scale_bits: int = 40) -> "CkksParams":
        """Fast unsafe parameters; ``depth`` sizes the chain as [60, 40 x (depth-1), 60]."""
        middle = 4 if depth is None else max(depth - 1, 0)
        bits = (60,) + (scale_bits,) * middle + (60,)
        return cls(poly_degree=poly_degree, coeff_modulus_bits=bits, scale_bits=scale_bits, profile="test-insecure")

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def max_depth(self) -> int:
        return len(self.coeff_modulus_bits) - 1

    @property
    def special_prime_bits(self) -> int:
        return max(self.coeff_modulus_bits) + 1

    @property
    def total_bits(self) -> int:
        return sum(self.coeff_modulus_bits) + self.special_prime_bits

    @property
    def insecure(self) -> bool:
        return self.profile != "secure"

    def canonical_bytes(self) -> bytes:
        bits = ",".join(str(b) for b in self.coeff_modulus_bits)
        return f"ckks|N={self.poly_degree}|bits={bits}|scale={self.scale_bits}|profile={self.profile}".encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()


class CkksEncoder:
    """Canonical embedding between real slot vectors and ring coefficients."""

    def __init__(self, degree: int):
        self.degree = degree
        self.slots = degree // 2
        self._twist = np.exp(1j * np.pi * np.arange(degree) / degree)

    def embed_inverse(self, values: Sequence[float]) -> np.ndarray:
        """Complex coefficients whose evaluations at the odd powers of zeta are the slots."""
        z = np.zeros(self.slots, dtype=complex)
        z[: len(values)] = values
        full = np.concatenate([z, np.conj(z[::-1])])
        return np.fft.fft(full) / self.degree * np.conj(self._twist)

    def embed(self, coeffs: np.ndarray) -> np.ndarray:
        """Slot values m(zeta^(2k+1)) for k < N/2."""
        return (self.degree * np.fft.ifft(np.asarray(coeffs, dtype=float) * self._twist))[: self.slots]


class CkksContext:
    """Parameters plus the derived prime chain, NTT tables and encoder."""

    def __init__(self, params: CkksParams):
        self.params = params
        primes = ring.generate_primes(params.poly_degree, params.coeff_modulus_bits)
        special = ring.generate_primes(params.poly_degree, [params.special_prime_bits], exclude=primes)
        self.ring = RingParams(params.poly_degree, tuple(primes), tuple(special))
        self.encoder = CkksEncoder(params.poly_degree)
        if params.insecure:
            logger.warning(
                "CKKS context built with the test-insecure profile (N=%d, %d modulus bits)",
                params.poly_degree,
                params.total_bits,
            )

    @property
    def top_level(self) -> int:
        return self.ring.chain_length

    @property
    def slots(self) -> int:
        return self.encoder.slots

    @property
    def scale(self) -> float:
        return self.params.scale

    def modulus_bits(self, level: int) -> float:
        return sum(math.log2(q) for q in self.ring.primes[:level])


@dataclass(frozen=True)
class CkksPlaintext:
    context: CkksContext
    poly: RingElem
    scale: float
    length: int

    @property
    def level(self) -> int:
        return self.poly.level


@dataclass(frozen=True)
class CkksCiphertext:
    context: CkksContext
    components: Tuple[RingElem, ...]
    scale: float
    length: int

    @property
    def level(self) -> int:
        return self.components[0].level

    @property
    def size(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class SecretKey:
    poly: RingElem  # ternary, extended basis, NTT domain


@dataclass(frozen=True)
class PublicKey:
    b: RingElem
    a: RingElem


@dataclass(frozen=True)
class RelinKey:
    """One (k0, k1) pair per chain prime, over the extended basis, NTT domain."""

    digits: Tuple[Tuple[RingElem, RingElem], ...]
    _stacks: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def stacked(self, level: int) -> Tuple[np.ndarray, np.ndarray]:
        """(k0, k1) of the first ``level`` digits over the level's extended basis.

        Shape (level, level + specials, N) each, Montgomery form. The full-depth
        stack is built once and sliced per level.
        """
        full = self._stacks.get("full")
        if full is None:
            full = tuple(np.stack([ring.montgomery_form(pair[j]) for pair in self.digits]) for j in (0, 1))
            self._stacks["full"] = full
        params = self.digits[0][0].params
        rows = list(range(level)) + list(range(params.chain_length, len(params.all_primes)))
        return full[0][:level][:, rows], full[1][:level][:, rows]


@dataclass(frozen=True)
class KeySet:
    context: CkksContext
    public_key: PublicKey
    relin_key: RelinKey
    secret_key: Optional[SecretKey] = None

    def public_view(self) -> "KeySet":
        return replace(self, secret_key=None)


Operand = Union[CkksCiphertext, CkksPlaintext]


# --- encoding ----------------------------------------------------------------


def _level_or_top(context: CkksContext, level: Optional[int]) -> int:
    level = context.top_level if level is None else level
    if not 1 <= level <= context.top_level:
        raise LevelError(f"Level {level} outside the modulus chain 1..{context.top_level}")
    return level


def encode(
    values: Sequence[float],
    context: CkksContext,
    level: Optional[int] = None,
    scale: Optional[float] = None,
) -> CkksPlaintext:
    """Encode up to N/2 real values into a plaintext polynomial scaled by ``scale``."""
    level = _level_or_top(context, level)
    scale = context.scale if scale is None else scale
    values = np.asarray(values, dtype=float).ravel()
    if values.size > context.slots:
        raise CapacityError(f"{values.size} values exceed the {context.slots} available slots")
    if not np.all(np.isfinite(values)):
        raise EncodingRangeError("Cannot encode non-finite values")

    coeffs = np.real(context.encoder.embed_inverse(values)) * scale
    bound = math.log2(max(float(np.max(np.abs(coeffs), initial=0.0)), 1.0)) + 1
    if bound >= context.modulus_bits(level):
        raise EncodingRangeError(
            f"Scaled values need {bound:.1f} bits but the level-{level} modulus has {context.modulus_bits(level):.1f}"
        )
    rounded = np.rint(coeffs)
    if bound < 62:
        integers = rounded.astype(np.int64)
    else:
        integers = [int(c) for c in rounded]
    poly = ring.from_integers(context.ring, integers, context.ring.data_basis(level))
    return CkksPlaintext(context, poly, float(scale), int(values.size))


def encode_constant(
    value: float,
    context: CkksContext,
    level: Optional[int] = None,
    scale: Optional[float] = None,
) -> CkksPlaintext:
    """Constant polynomial round(value * scale): every slot holds ``value``."""
    level = _level_or_top(context, level)
    scale = context.scale if scale is None else scale
    coeffs = [0] * context.ring.degree
    coeffs[0] = int(round(float(value) * scale))
    if abs(coeffs[0]).bit_length() + 1 >= context.modulus_bits(level):
        raise EncodingRangeError(f"Constant {value} does not fit the level-{level} modulus")
    poly = ring.from_integers(context.ring, coeffs, context.ring.data_basis(level))
    return CkksPlaintext(context, poly, float(scale), 1)


def decode(pt: CkksPlaintext) -> List[float]:
    if not pt.scale > 0 or not math.isfinite(pt.scale):
        raise CorruptionError(f"Plaintext carries an invalid scale: {pt.scale}")
    coeffs = ring.to_integers(pt.poly).astype(float) / pt.scale
    slots = pt.context.encoder.embed(coeffs)
    return [float(v) for v in np.real(slots[: pt.length])]


# --- keys, encryption, decryption --------------------------------------------


def keygen(context: CkksContext, rng: np.random.Generator) -> KeySet:
    params = context.ring
    data = params.data_basis()
    extended = params.extended_basis()

    s = ring.to_ntt(ring.sample("ternary", params, rng, extended))
    s_data = ring.restrict(s, data)

    a = ring.to_ntt(ring.sample("uniform", params, rng, data))
    e = ring.to_ntt(ring.sample("gaussian", params, rng, data))
    b = ring.ring_add(ring.ring_neg(ring.ring_mul(a, s_data)), e)

    # digit i carries P * s^2 on row i only (P the special prime)
    scaled_s_squared = ring.ring_mul_scalar(ring.ring_mul(s, s), params.special_primes[0])
    digits = []
    for i in range(params.chain_length):
        a_i = ring.to_ntt(ring.sample("uniform", params, rng, extended))
        e_i = ring.to_ntt(ring.sample("gaussian", params, rng, extended))
        k0 = ring.ring_add(ring.ring_neg(ring.ring_mul(a_i, s)), e_i)
        digits.append((ring.ring_add(k0, ring.select_row(scaled_s_squared, i)), a_i))

    logger.debug("Generated CKKS keys for N=%d, chain=%d", params.degree, params.chain_length)
    return KeySet(
        context=context,
        public_key=PublicKey(b=b, a=a),
        relin_key=RelinKey(digits=tuple(digits)),
        secret_key=SecretKey(poly=s),
    )


def encrypt(pt: CkksPlaintext, pk: PublicKey, rng: np.random.Generator) -> CkksCiphertext:
    context = pt.context
    if pt.level > context.top_level:
        raise LevelError(f"Plaintext level {pt.level} exceeds the chain length {context.top_level}")
    params = context.ring
    basis = params.data_basis(pt.level)
    u = ring.to_ntt(ring.sample("ternary", params, rng, basis))
    e0 = ring.sample("gaussian", params, rng, basis)
    e1 = ring.sample("gaussian", params, rng, basis)
    b = ring.restrict(pk.b, basis)
    a = ring.restrict(pk.a, basis)
    c0 = ring.ring_add(ring.ring_add(ring.from_ntt(ring.ring_mul(b, u)), e0), pt.poly)
    c1 = ring.ring_add(ring.from_ntt(ring.ring_mul(a, u)), e1)
    return CkksCiphertext(context, (c0, c1), pt.scale, pt.length)


def decrypt(ct: CkksCiphertext, sk: SecretKey) -> CkksPlaintext:
    if ct.size != 2:
        raise RelinearizationRequiredError(f"Cannot decrypt a size-{ct.size} ciphertext; relinearize first")
    c0, c1 = ct.components
    s = ring.restrict(sk.poly, c0.basis)
    m = ring.ring_add(c0, ring.from_ntt(ring.ring_mul(ring.to_ntt(c1), s)))
    return CkksPlaintext(ct.context, m, ct.scale, ct.length)


# --- evaluation ----------------------------------------------------------------


def _check_same_level(a: CkksCiphertext, b: Operand, op: str) -> None:
    if a.level != b.level:
        raise AlignmentError(f"{op}: level mismatch ({a.level} vs {b.level}); mod-switch first")


def _check_same_scale(a: CkksCiphertext, b: Operand, op: str) -> None:
    if not math.isclose(a.scale, b.scale, rel_tol=SCALE_RTOL):
        raise AlignmentError(f"{op}: scale mismatch ({a.scale:.6g} vs {b.scale:.6g}); align first")


def _require_size_two(ct: CkksCiphertext, op: str) -> None:
    if ct.size != 2:
        raise RelinearizationRequiredError(f"{op} expects a size-2 ciphertext, got size {ct.size}")


def eval_add(a: CkksCiphertext, b: Operand) -> CkksCiphertext:
    _require_size_two(a, "eval_add")
    _check_same_level(a, b, "eval_add")
    _check_same_scale(a, b, "eval_add")
    length = max(a.length, b.length)
    if isinstance(b, CkksPlaintext):
        c0 = ring.ring_add(a.components[0], b.poly)
        return CkksCiphertext(a.context, (c0, a.components[1]), a.scale, length)
    _require_size_two(b, "eval_add")
    components = tuple(ring.ring_add(x, y) for x, y in zip(a.components, b.components))
    return CkksCiphertext(a.context, components, a.scale, length)


def eval_negate(a: CkksCiphertext) -> CkksCiphertext:
    return replace(a, components=tuple(ring.ring_neg(c) for c in a.components))


def eval_sub(a: CkksCiphertext, b: Operand) -> CkksCiphertext:
    if isinstance(b, CkksPlaintext):
        negated = replace(b, poly=ring.ring_neg(b.poly))
        return eval_add(a, negated)
    return eval_add(a, eval_negate(b))


def eval_add_plain(a: CkksCiphertext, b: CkksPlaintext) -> CkksCiphertext:
    if not isinstance(b, CkksPlaintext):
        raise ContractViolationError("eval_add_plain expects a plaintext operand")
    return eval_add(a, b)


def eval_mul_integer(a: CkksCiphertext, k: int) -> CkksCiphertext:
    """Multiply by an exact integer; consumes no level and keeps the scale."""
    return replace(a, components=tuple(ring.ring_mul_scalar(c, k) for c in a.components))


def eval_mul(a: CkksCiphertext, b: Operand, rlk: Optional[RelinKey] = None) -> CkksCiphertext:
    """Multiply, relinearize (ciphertext operand) and rescale.

    The result sits one level lower with scale close to the context's scale.
    """
    _require_size_two(a, "eval_mul")
    _check_same_level(a, b, "eval_mul")
    if a.level < 2:
        raise DepthBudgetError(
            "eval_mul: no prime left to drop; the circuit exceeds the coefficient modulus chain",
            required_depth=a.context.top_level,
        )
    scale = a.scale * b.scale
    length = max(a.length, b.length)
    a0, a1 = (ring.to_ntt(c) for c in a.components)

    if isinstance(b, CkksPlaintext):
        p = ring.to_ntt(b.poly)
        components = (ring.from_ntt(ring.ring_mul(a0, p)), ring.from_ntt(ring.ring_mul(a1, p)))
        return rescale(CkksCiphertext(a.context, components, scale, length))

    if rlk is None:
        raise ContractViolationError("eval_mul of two ciphertexts requires a relinearization key")
    _require_size_two(b, "eval_mul")
    b0, b1 = (ring.to_ntt(c) for c in b.components)
    d0 = ring.ring_mul(a0, b0)
    d1 = ring.ring_add(ring.ring_mul(a0, b1), ring.ring_mul(a1, b0))
    d2 = ring.ring_mul(a1, b1)
    tensor = CkksCiphertext(a.context, tuple(ring.from_ntt(d) for d in (d0, d1, d2)), scale, length)
    return rescale(relinearize(tensor, rlk))


def eval_mul_const(a: CkksCiphertext, value: float) -> CkksCiphertext:
    """Multiply by a real constant encoded at the context scale (one level)."""
    return eval_mul(a, encode_constant(value, a.context, level=a.level))


def relinearize(ct: CkksCiphertext, rlk: RelinKey) -> CkksCiphertext:
    """Switch the s^2 component of a size-3 ciphertext back onto (1, s).

    Every residue row of s^2's coefficient is one digit; all digits are lifted
    and transformed in one stacked NTT, multiplied against the cached key stack,
    then divided by the special prime (ModDown).
    """
    if ct.size == 2:
        return ct
    if ct.size != 3:
        raise ContractViolationError(f"Cannot relinearize a size-{ct.size} ciphertext")
    params = ct.context.ring
    c0, c1, d2 = ct.components
    extended = params.extended_basis(ct.level)
    digits = ring.lift_rows_ntt(d2, extended)
    k0, k1 = rlk.stacked(ct.level)
    r0 = ring.divide_and_drop_last(ring.from_ntt(ring.inner_product_ntt(params, digits, k0, extended)))
    r1 = ring.divide_and_drop_last(ring.from_ntt(ring.inner_product_ntt(params, digits, k1, extended)))
    return CkksCiphertext(ct.context, (ring.ring_add(c0, r0), ring.ring_add(c1, r1)), ct.scale, ct.length)


def rescale(ct: CkksCiphertext) -> CkksCiphertext:
    """Drop the last active prime q and divide the scale by q.

    When q is much larger than scale / Delta (the 60-bit top prime), the
    ciphertext is first multiplied by the exact integer round(Delta * q / scale)
    so that the result lands back on Delta.
    """
    if ct.level < 2:
        raise DepthBudgetError("rescale: level 1 ciphertext has no prime left to drop")
    params = ct.context.ring
    basis = ct.components[0].basis
    q_last = params.moduli(basis)[-1]
    factor = round(ct.context.scale * q_last / ct.scale)
    scale = ct.scale
    components = ct.components
    if factor >= 2:
        components = tuple(ring.ring_mul_scalar(c, factor) for c in components)
        scale *= factor

    rescaled = tuple(ring.divide_and_drop_last(ring.from_ntt(c)) for c in components)
    return CkksCiphertext(ct.context, rescaled, scale / q_last, ct.length)


def mod_switch_to(ct: CkksCiphertext, level: int) -> CkksCiphertext:
    """Drop primes down to ``level`` without touching the scale."""
    if level > ct.level:
        raise LevelError(f"Cannot mod-switch up from level {ct.level} to {level}")
    if level < 1:
        raise LevelError("Level must be >= 1")
    if level == ct.level:
        return ct
    basis = ct.context.ring.data_basis(level)
    return replace(ct, components=tuple(ring.restrict(c, basis) for c in ct.components))


def mod_switch_plain(pt: CkksPlaintext, level: int) -> CkksPlaintext:
    if level > pt.level:
        raise LevelError(f"Cannot mod-switch up from level {pt.level} to {level}")
    return replace(pt, poly=ring.restrict(pt.poly, pt.context.ring.data_basis(level)))


def align(a: CkksCiphertext, b: CkksCiphertext, rel_tol: float = ALIGN_SCALE_RTOL) -> Tuple[CkksCiphertext, CkksCiphertext]:
    """Bring two ciphertexts to a common level and scale.

    The higher one is mod-switched down; when the scales differ by at most
    ``rel_tol`` (prime drift around 2^scale_bits), ``b`` is relabelled with the
    scale of ``a``, which perturbs its value by the same relative amount.
    """
    level = min(a.level, b.level)
    a, b = mod_switch_to(a, level), mod_switch_to(b, level)
    if math.isclose(a.scale, b.scale, rel_tol=SCALE_RTOL):
        return a, b
    if not math.isclose(a.scale, b.scale, rel_tol=rel_tol):
        raise AlignmentError(f"Scales {a.scale:.6g} and {b.scale:.6g} are too far apart to align")
    return a, replace(b, scale=a.scale)


# --- instrumentation -------------------------------------------------------------


def noise_budget_bits(ct: CkksCiphertext, sk: SecretKey) -> float:
    """Headroom (bits) between the decrypted polynomial and the level modulus."""
    m = ring.to_integers(decrypt(ct, sk).poly)
    peak = max(abs(int(v)) for v in m)
    return ct.context.modulus_bits(ct.level) - 1 - math.log2(max(peak, 1))


def decryption_error(ct: CkksCiphertext, sk: SecretKey, expected: Sequence[float]) -> float:
    values = decode(decrypt(ct, sk))
    return max(abs(v - e) for v, e in zip(values, expected))
