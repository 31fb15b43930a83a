"""Deterministic primitives shared by every other module.

Suite (fixed per build, see README "Cryptographic suite"):

* hash: SHA-256
* key derivation: HKDF-SHA256, IKM = parent, info = purpose || 0x00 || context
* signatures: Ed25519 (deterministic, 32-byte keys, 64-byte signatures)
* AEAD: AES-256-GCM with 96-bit nonces
* secret sharing: Shamir over GF(2^8) (AES polynomial 0x11B), one
  polynomial per secret byte
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    DecryptError,
    DuplicateIndexError,
    InsufficientSharesError,
    ParameterError,
    RefreshError,
    UnknownPurposeError,
)

Digest = bytes
SecretScalar = bytes
Signature = bytes
RandBytes = Callable[[int], bytes]

DIGEST_SIZE = 32
SECRET_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 12
ZERO_DIGEST = bytes(DIGEST_SIZE)

# Labels accepted by derive_key. The KMS derivation tree uses all four.
PURPOSES = frozenset({"app-ca", "disk", "env", "ecdsa"})


def hash_data(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def hash_concat(*parts: bytes) -> Digest:
    return hashlib.sha256(b"".join(parts)).digest()


def derive_key(parent: SecretScalar, purpose: str, context: bytes) -> SecretScalar:
    """Derive a child secret from ``parent`` for one ``purpose`` and ``context``.

    HKDF extract-then-expand keyed by the parent secret. The expansion info
    is ``purpose || 0x00 || context``; purpose labels never contain NUL so
    the split point is unambiguous.
    """
    if purpose not in PURPOSES:
        raise UnknownPurposeError(f"unregistered derivation purpose {purpose!r}")
    if len(parent) != SECRET_SIZE:
        raise ParameterError("parent secret must be 32 bytes")
    info = purpose.encode("ascii") + b"\x00" + bytes(context)
    hkdf = HKDF(algorithm=hashes.SHA256(), length=SECRET_SIZE, salt=None, info=info)
    return hkdf.derive(parent)


# ---------------------------------------------------------------------------
# Signatures


@dataclass(frozen=True)
class KeyPair:
    secret: SecretScalar
    public: bytes

    @classmethod
    def from_secret(cls, secret: SecretScalar) -> "KeyPair":
        if len(secret) != SECRET_SIZE:
            raise ParameterError("signing secret must be 32 bytes")
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        return cls(secret=bytes(secret), public=sk.public_key().public_bytes_raw())

    @classmethod
    def generate(cls, randbytes: RandBytes = os.urandom) -> "KeyPair":
        return cls.from_secret(randbytes(SECRET_SIZE))

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def sign(key: KeyPair, message: bytes) -> Signature:
    return Ed25519PrivateKey.from_private_bytes(key.secret).sign(message)


def verify(public: bytes, message: bytes, signature: Signature) -> bool:
    """Return True iff ``signature`` is valid; malformed inputs yield False."""
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# ---------------------------------------------------------------------------
# AEAD


def aead_seal(key: SecretScalar, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ParameterError("nonce must be 12 bytes")
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_open(key: SecretScalar, nonce: bytes, aad: bytes, ciphertext: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise DecryptError("bad nonce length")
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise DecryptError("authentication failed") from None


# ---------------------------------------------------------------------------
# GF(2^8) arithmetic


def _gf_mul_slow(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11B
        b >>= 1
    return r


_EXP = [0] * 510
_LOG = [0] * 256
_x = 1
for _i in range(255):
    _EXP[_i] = _x
    _LOG[_x] = _i
    _x = _gf_mul_slow(_x, 3)
for _i in range(255, 510):
    _EXP[_i] = _EXP[_i - 255]
del _x, _i

# _MUL_ROWS[c] maps every byte b to c*b; used with bytes.translate.
_MUL_ROWS = [bytes(_gf_mul_slow(c, b) for b in range(256)) for c in range(256)]


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _EXP[_LOG[a] + _LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(2^8)")
    return _EXP[255 - _LOG[a]]


def _scale(coeff: int, data: bytes) -> bytes:
    return data.translate(_MUL_ROWS[coeff])


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


# ---------------------------------------------------------------------------
# Shamir secret sharing


@dataclass(frozen=True)
class KeyShare:
    index: int
    payload: bytes

    def __post_init__(self):
        if not 1 <= self.index <= 255:
            raise ParameterError(f"share index {self.index} outside 1..255")

    def to_bytes(self) -> bytes:
        return bytes([self.index]) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyShare":
        if len(data) < 2:
            raise ParameterError("share encoding too short")
        return cls(index=data[0], payload=bytes(data[1:]))

    def __repr__(self) -> str:
        return f"KeyShare(index={self.index}, payload=<{len(self.payload)} bytes>)"


def lagrange_coefficients(xs: Sequence[int], at: int = 0) -> list[int]:
    """Lagrange basis values at ``at`` for the interpolation nodes ``xs``."""
    coeffs = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = gf_mul(num, at ^ xj)
                den = gf_mul(den, xi ^ xj)
        coeffs.append(gf_mul(num, gf_inv(den)))
    return coeffs


def _eval_poly(coeffs: Sequence[bytes], x: int) -> bytes:
    acc = bytes(len(coeffs[0]))
    power = 1
    for c in coeffs:
        acc = _xor(acc, _scale(power, c))
        power = gf_mul(power, x)
    return acc


def _interpolate(shares: Sequence[KeyShare], at: int) -> bytes:
    lams = lagrange_coefficients([s.index for s in shares], at)
    acc = bytes(len(shares[0].payload))
    for lam, share in zip(lams, shares):
        acc = _xor(acc, _scale(lam, share.payload))
    return acc


def _check_parameters(threshold: int, count: int) -> None:
    if not 1 <= threshold <= count:
        raise ParameterError(f"need 1 <= t <= n, got t={threshold} n={count}")
    if count > 255:
        raise ParameterError("at most 255 shares fit in GF(2^8)")


def _check_share_set(shares: Sequence[KeyShare], threshold: int) -> None:
    seen = set()
    for s in shares:
        if s.index in seen:
            raise DuplicateIndexError(f"share index {s.index} appears twice")
        seen.add(s.index)
    if threshold < 1:
        raise ParameterError("threshold must be at least 1")
    if len(shares) < threshold:
        raise InsufficientSharesError(f"need {threshold} shares, got {len(shares)}")
    if len({len(s.payload) for s in shares}) != 1:
        raise ParameterError("share payloads differ in length")


def shamir_split(
    secret: bytes, threshold: int, count: int, randbytes: RandBytes = os.urandom
) -> list[KeyShare]:
    _check_parameters(threshold, count)
    if not secret:
        raise ParameterError("empty secret")
    coeffs = [bytes(secret)] + [randbytes(len(secret)) for _ in range(threshold - 1)]
    return [KeyShare(x, _eval_poly(coeffs, x)) for x in range(1, count + 1)]


def shamir_reconstruct(shares: Sequence[KeyShare], threshold: int) -> bytes:
    """Interpolate f(0) from the first ``threshold`` shares."""
    shares = list(shares)
    _check_share_set(shares, threshold)
    return _interpolate(shares[:threshold], 0)


def share_consistent(shares: Sequence[KeyShare], threshold: int) -> bool:
    """True iff every share lies on the degree t-1 curve through the first t."""
    base = list(shares[:threshold])
    return all(_interpolate(base, s.index) == s.payload for s in shares[threshold:])


def zero_sharing(
    indices: Iterable[int], threshold: int, length: int, randbytes: RandBytes = os.urandom
) -> dict[int, bytes]:
    """Evaluations of a fresh random polynomial with zero constant term.

    With threshold 1 the polynomial is identically zero.
    """
    coeffs = [bytes(length)] + [randbytes(length) for _ in range(threshold - 1)]
    return {x: _eval_poly(coeffs, x) for x in indices}


def apply_deltas(shares: Sequence[KeyShare], deltas: dict[int, bytes]) -> list[KeyShare]:
    return [KeyShare(s.index, _xor(s.payload, deltas[s.index])) for s in shares]


def zero_share_refresh(
    old_shares: Sequence[KeyShare], threshold: int, randbytes: RandBytes = os.urandom
) -> list[KeyShare]:
    old_shares = list(old_shares)
    try:
        _check_share_set(old_shares, threshold)
    except (InsufficientSharesError, DuplicateIndexError, ParameterError) as exc:
        raise RefreshError(str(exc)) from exc
    if not share_consistent(old_shares, threshold):
        raise RefreshError("shares do not lie on one polynomial of the stated degree")
    deltas = zero_sharing(
        [s.index for s in old_shares], threshold, len(old_shares[0].payload), randbytes
    )
    return apply_deltas(old_shares, deltas)


def enrollment_contributions(
    quorum: Sequence[KeyShare], new_index: int, randbytes: RandBytes = os.urandom
) -> list[bytes]:
    """Masked per-holder contributions that sum to f(new_index).

    Each holder i sends lambda_i(new_index) * s_i plus a mask; the masks XOR
    to zero so only the sum, the new share, is meaningful to the recipient.
    """
    if any(s.index == new_index for s in quorum):
        raise DuplicateIndexError(f"index {new_index} already held")
    lams = lagrange_coefficients([s.index for s in quorum], new_index)
    length = len(quorum[0].payload)
    masks = [randbytes(length) for _ in range(len(quorum) - 1)]
    last = bytes(length)
    for m in masks:
        last = _xor(last, m)
    masks.append(last)
    return [_xor(_scale(lam, s.payload), m) for lam, s, m in zip(lams, quorum, masks)]


def combine_contributions(contributions: Sequence[bytes]) -> bytes:
    acc = bytes(len(contributions[0]))
    for c in contributions:
        acc = _xor(acc, c)
    return acc
