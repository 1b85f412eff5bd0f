"""Symmetric-key primitives shared by all protocol engines.

Keys are fixed-size byte strings compared by value.  All derivations are a
single hash with a one-byte domain prefix, so the four derivation functions
can never collide with each other.  Key wrapping uses deterministic
authenticated encryption (AES-SIV without a nonce): wrapping the same payload
under the same key always yields the same ciphertext, which keeps simulation
traces byte-reproducible, and unwrapping with the wrong key fails detectably.

Randomness is always drawn from a caller-supplied seeded generator; nothing
in this module touches ambient entropy.  Operations that the cost model
charges to the server (fresh keys, wraps) require an explicit meter so they
cannot run unmetered inside protocol code.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from random import Random
from typing import Iterable, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESSIV

KEY_LEN = 32

_DOMAIN_DERIVE = b"\x01"
_DOMAIN_BLIND = b"\x02"
_DOMAIN_MIX = b"\x03"
_DOMAIN_CODE = b"\x04"


class CryptoError(Exception):
    """Base class for crypto-layer failures."""


class UnwrapError(CryptoError):
    """Unwrapping failed: wrong key or corrupted ciphertext."""


class MeterLike(Protocol):
    """Anything that can count metered operations (see core.CostMeter)."""

    def count(self, kind: str, amount: int = 1) -> None: ...


class KeyRole(Enum):
    """Descriptive label for where a key lives; never part of key equality."""

    INDIVIDUAL = "individual"
    MIDDLE = "middle"
    GROUP = "group"


@dataclass(frozen=True)
class SymKey:
    """A symmetric key value.  Equality and hashing use the bytes only."""

    data: bytes
    role: KeyRole = field(default=KeyRole.GROUP, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes) or len(self.data) != KEY_LEN:
            raise ValueError(f"key must be {KEY_LEN} bytes")

    @property
    def fingerprint(self) -> str:
        """Short hex tag (first 4 bytes) for logs and witness chains."""
        return self.data[:4].hex()

    def __repr__(self) -> str:  # avoid dumping full key material in logs
        return f"SymKey({self.fingerprint}.., {self.role.value})"


@dataclass(frozen=True)
class WrappedKey:
    """A key encrypted under another key.

    ``kek_id`` names the tree node (or well-known label) whose key did the
    wrapping, so receivers know which of their keys to try.  It is routing
    metadata, not a secret.
    """

    ciphertext: bytes
    kek_id: int | str

    def __len__(self) -> int:
        return len(self.ciphertext)


def _hash(domain: bytes, payload: bytes) -> bytes:
    return hashlib.sha256(domain + payload).digest()


def derive(key: SymKey) -> SymKey:
    """One-way refresh: the holder of ``key`` can step it forward, never back."""
    return SymKey(_hash(_DOMAIN_DERIVE, key.data), role=key.role)


def blind(key: SymKey) -> SymKey:
    """One-way image of a key that is safe to show to non-holders."""
    return SymKey(_hash(_DOMAIN_BLIND, key.data), role=key.role)


def mix(left: SymKey, right: SymKey) -> SymKey:
    """Combine two (blinded) child keys into a parent key; order matters."""
    return SymKey(_hash(_DOMAIN_MIX, left.data + right.data), role=KeyRole.MIDDLE)


def encode_code(code: str) -> bytes:
    """Digit string as ASCII bytes, right-aligned in a zero-padded key block."""
    if not code or not code.isascii() or not code.isdigit():
        raise ValueError(f"node code must be a non-empty digit string, got {code!r}")
    if len(code) > KEY_LEN:
        raise ValueError(f"node code longer than {KEY_LEN} digits: {code!r}")
    raw = code.encode("ascii")
    return b"\x00" * (KEY_LEN - len(raw)) + raw


def derive_with_code(group_key: SymKey, code: str) -> SymKey:
    """Key of a coded tree node: hash of the group key XOR its node code."""
    pad = encode_code(code)
    mixed = bytes(a ^ b for a, b in zip(group_key.data, pad))
    return SymKey(_hash(_DOMAIN_CODE, mixed), role=KeyRole.MIDDLE)


def decode_code(block: bytes) -> str:
    """Inverse of :func:`encode_code`: strip the zero padding."""
    code = block.lstrip(b"\x00").decode("ascii")
    if not code or not code.isdigit():
        raise ValueError("block does not carry a digit-string code")
    return code


def random_key(rng: Random, meter: MeterLike, role: KeyRole = KeyRole.GROUP) -> SymKey:
    """Fresh key from the seeded generator; metered as one key generation."""
    meter.count("keygen")
    return SymKey(rng.randbytes(KEY_LEN), role=role)


def wrap(kek: SymKey, payload: SymKey, meter: MeterLike, kek_id: int | str) -> WrappedKey:
    """Encrypt ``payload`` under ``kek``; metered as one encryption."""
    meter.count("encrypt")
    ciphertext = AESSIV(kek.data).encrypt(payload.data, None)
    wrapped = WrappedKey(ciphertext=ciphertext, kek_id=kek_id)
    record = getattr(meter, "record_wrap", None)
    if record is not None:
        record(kek, wrapped)
    return wrapped


def unwrap(kek: SymKey, wrapped: WrappedKey) -> SymKey:
    """Decrypt a wrapped key; raises UnwrapError if ``kek`` is not the wrapper."""
    try:
        data = AESSIV(kek.data).decrypt(wrapped.ciphertext, None)
    except InvalidTag as exc:
        raise UnwrapError(f"cannot unwrap payload labelled {wrapped.kek_id!r}") from exc
    return SymKey(data)


@dataclass(frozen=True)
class VectorResult:
    line_no: int
    function: str
    ok: bool
    expected: str
    actual: str


def _compute_vector(function: str, inputs: list[bytes]) -> bytes:
    if function == "derive":
        (key,) = inputs
        return derive(SymKey(key)).data
    if function == "blind":
        (key,) = inputs
        return blind(SymKey(key)).data
    if function == "mix":
        left, right = inputs
        return mix(SymKey(left), SymKey(right)).data
    if function == "derive_with_code":
        key, code_ascii = inputs
        return derive_with_code(SymKey(key), code_ascii.decode("ascii")).data
    if function == "wrap":
        kek, payload = inputs
        meter = _NullCounter()
        return wrap(SymKey(kek), SymKey(payload), meter, kek_id="vector").ciphertext
    raise ValueError(f"unknown vector function {function!r}")


class _NullCounter:
    def count(self, kind: str, amount: int = 1) -> None:
        pass


def iter_golden_vectors(text: str) -> Iterable[tuple[int, str, list[bytes], bytes]]:
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, raw_inputs, raw_output = (part.strip() for part in line.split(","))
        inputs = [bytes.fromhex(tok) for tok in raw_inputs.split()]
        yield line_no, name, inputs, bytes.fromhex(raw_output)


def default_vector_text() -> str:
    return resources.files("gkms").joinpath("data/golden_vectors.txt").read_text()


def verify_golden_vectors(text: str | None = None) -> list[VectorResult]:
    """Recompute every golden vector; returns one result per record."""
    if text is None:
        text = default_vector_text()
    results = []
    for line_no, name, inputs, expected in iter_golden_vectors(text):
        actual = _compute_vector(name, inputs)
        results.append(
            VectorResult(
                line_no=line_no,
                function=name,
                ok=actual == expected,
                expected=expected.hex(),
                actual=actual.hex(),
            )
        )
    if not results:
        raise ValueError("golden vector text contained no records")
    return results
