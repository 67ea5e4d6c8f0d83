"""Binary container for CKKS objects.

Layout (little-endian)::

    magic      8 bytes  b"HEWNNCKS"
    version    u16
    tag        u8       object type (see ``Tag``)
    params     32 bytes sha256 of the canonical CkksParams encoding
    watermark  u8       1 when the params use the test-insecure profile
    length     u64      payload byte count
    payload    ...
    checksum   u32      crc32 over every preceding byte

Payload field order per tag:

    PARAMS      utf-8 JSON of the params model
    PLAINTEXT   f64 scale, u32 length, ring element
    CIPHERTEXT  f64 scale, u32 length, u8 component count, ring elements
    KEYSET      u8 has_secret, public b, public a, u16 digit count,
                (k0, k1) per digit, secret key when present

A ring element is u8 is_ntt, u8 basis size, u8 prime index per basis entry,
then basis size x N residues as u64.
"""

import io
import json
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Union

import numpy as np

from .ckks import (
    CkksCiphertext,
    CkksContext,
    CkksParams,
    CkksPlaintext,
    KeySet,
    PublicKey,
    RelinKey,
    SecretKey,
)
from .errors import ContextMismatchError, ContractViolationError, FormatError
from .ring import RingElem

MAGIC = b"HEWNNCKS"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sHB32sBQ")
_CHECKSUM = struct.Struct("<I")


class Tag(IntEnum):
    PARAMS = 1
    PLAINTEXT = 2
    CIPHERTEXT = 3
    KEYSET = 4


@dataclass(frozen=True)
class Header:
    version: int
    tag: Tag
    params_digest: bytes
    insecure: bool
    length: int


Serializable = Union[CkksParams, CkksPlaintext, CkksCiphertext, KeySet]


# --- writing -------------------------------------------------------------------


def _write_elem(buf: io.BytesIO, elem: RingElem) -> None:
    buf.write(struct.pack("<BB", int(elem.is_ntt), len(elem.basis)))
    buf.write(bytes(elem.basis))
    buf.write(np.asarray(elem.residues, dtype="<u8").tobytes())


def _frame(tag: Tag, params: CkksParams, payload: bytes) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, int(tag), params.digest(), int(params.insecure), len(payload))
    body = header + payload
    return body + _CHECKSUM.pack(zlib.crc32(body) & 0xFFFFFFFF)


def serialize(obj: Serializable) -> bytes:
    buf = io.BytesIO()
    if isinstance(obj, CkksParams):
        buf.write(json.dumps(obj.model_dump(mode="json"), sort_keys=True).encode("utf-8"))
        return _frame(Tag.PARAMS, obj, buf.getvalue())

    if isinstance(obj, CkksPlaintext):
        buf.write(struct.pack("<dI", obj.scale, obj.length))
        _write_elem(buf, obj.poly)
        return _frame(Tag.PLAINTEXT, obj.context.params, buf.getvalue())

    if isinstance(obj, CkksCiphertext):
        buf.write(struct.pack("<dIB", obj.scale, obj.length, obj.size))
        for comp in obj.components:
            _write_elem(buf, comp)
        return _frame(Tag.CIPHERTEXT, obj.context.params, buf.getvalue())

    if isinstance(obj, KeySet):
        buf.write(struct.pack("<B", int(obj.secret_key is not None)))
        _write_elem(buf, obj.public_key.b)
        _write_elem(buf, obj.public_key.a)
        buf.write(struct.pack("<H", len(obj.relin_key.digits)))
        for k0, k1 in obj.relin_key.digits:
            _write_elem(buf, k0)
            _write_elem(buf, k1)
        if obj.secret_key is not None:
            _write_elem(buf, obj.secret_key.poly)
        return _frame(Tag.KEYSET, obj.context.params, buf.getvalue())

    raise ContractViolationError(f"Cannot serialize object of type {type(obj).__name__}")


# --- reading -------------------------------------------------------------------


class _Reader:
    def __init__(self, payload: bytes):
        self._view = memoryview(payload)
        self._pos = 0

    def take(self, size: int) -> bytes:
        if self._pos + size > len(self._view):
            raise FormatError("Payload truncated")
        chunk = self._view[self._pos : self._pos + size].tobytes()
        self._pos += size
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def finish(self) -> None:
        if self._pos != len(self._view):
            raise FormatError(f"{len(self._view) - self._pos} trailing payload bytes")


def read_header(data: bytes) -> Header:
    """Validate framing and checksum; return the parsed header."""
    if len(data) < _HEADER.size + _CHECKSUM.size:
        raise FormatError("Input shorter than the fixed header")
    magic, version, tag, digest, watermark, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("Bad magic bytes")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}")
    if len(data) != _HEADER.size + length + _CHECKSUM.size:
        raise FormatError(f"Declared payload length {length} does not match input size")
    (stored,) = _CHECKSUM.unpack_from(data, len(data) - _CHECKSUM.size)
    if zlib.crc32(data[: -_CHECKSUM.size]) & 0xFFFFFFFF != stored:
        raise FormatError("Checksum mismatch")
    try:
        tag = Tag(tag)
    except ValueError as exc:
        raise FormatError(f"Unknown object tag {tag}") from exc
    if watermark not in (0, 1):
        raise FormatError(f"Invalid security watermark {watermark}")
    return Header(version, tag, digest, bool(watermark), length)


def _read_elem(reader: _Reader, context: CkksContext) -> RingElem:
    params = context.ring
    is_ntt, count = reader.unpack("<BB")
    basis = tuple(reader.take(count))
    if any(i >= len(params.all_primes) for i in basis):
        raise FormatError(f"Basis {basis} references primes outside the context")
    raw = np.frombuffer(reader.take(8 * count * params.degree), dtype="<u8").reshape(count, params.degree)
    moduli = np.array(params.moduli(basis), dtype=np.uint64).reshape(-1, 1)
    if np.any(raw >= moduli):
        raise FormatError("Residue out of range for its prime")
    residues = raw.astype(np.uint64)
    return RingElem(params, residues, basis, is_ntt=bool(is_ntt))


def deserialize(data: bytes, context: Optional[CkksContext] = None) -> Serializable:
    """Inverse of ``serialize``; every non-params object needs the matching context."""
    header = read_header(data)
    reader = _Reader(data[_HEADER.size : _HEADER.size + header.length])

    if header.tag is Tag.PARAMS:
        try:
            params = CkksParams(**json.loads(reader.take(header.length).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"Invalid params payload: {exc}") from exc
        if params.digest() != header.params_digest:
            raise FormatError("Params payload does not match its header digest")
        return params

    if context is None:
        raise ContractViolationError(f"Deserializing a {header.tag.name.lower()} requires a CkksContext")
    if context.params.digest() != header.params_digest:
        raise ContextMismatchError("Serialized object was produced under different CKKS parameters")

    if header.tag is Tag.PLAINTEXT:
        scale, length = reader.unpack("<dI")
        poly = _read_elem(reader, context)
        reader.finish()
        return CkksPlaintext(context, poly, scale, length)

    if header.tag is Tag.CIPHERTEXT:
        scale, length, size = reader.unpack("<dIB")
        if size not in (2, 3):
            raise FormatError(f"Invalid ciphertext size {size}")
        components = tuple(_read_elem(reader, context) for _ in range(size))
        reader.finish()
        if len({c.basis for c in components}) != 1:
            raise FormatError("Ciphertext components disagree on their basis")
        return CkksCiphertext(context, components, scale, length)

    (has_secret,) = reader.unpack("<B")
    public_key = PublicKey(b=_read_elem(reader, context), a=_read_elem(reader, context))
    (count,) = reader.unpack("<H")
    digits = []
    for _ in range(count):
        digits.append((_read_elem(reader, context), _read_elem(reader, context)))
    secret_key = SecretKey(poly=_read_elem(reader, context)) if has_secret else None
    reader.finish()
    return KeySet(context, public_key, RelinKey(digits=tuple(digits)), secret_key)


def serialize_many(objs: List[Serializable]) -> bytes:
    """Length-prefixed concatenation of serialized objects."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(objs)))
    for obj in objs:
        blob = serialize(obj)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def deserialize_many(data: bytes, context: Optional[CkksContext] = None) -> List[Serializable]:
    reader = _Reader(data)
    (count,) = reader.unpack("<I")
    out = []
    for _ in range(count):
        (size,) = reader.unpack("<Q")
        out.append(deserialize(reader.take(size), context))
    reader.finish()
    return out
