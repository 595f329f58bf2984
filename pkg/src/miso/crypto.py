"""Deterministic identifier blinding primitives.

All pseudonymous identifiers the mixer hands out are images of one keyed
PRF (HMAC-SHA256, 32-byte output) over an injective encoding of the
inputs. HMAC-SHA256 was picked over fancier PRFs because it has published
test vectors and identical output everywhere, which makes golden-vector
conformance testing possible.

Every derivation includes the issuing IdP's identifier alongside the raw
user id: raw ids are only unique within one IdP, and a bare "alice" from
two different providers must never collapse into one identity.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PRF_KEY_LEN = 32
SALT_LEN = 32
SECRET_LEN = 32

_MAX_FIELD = 0xFFFFFFFF


class EncodingError(ValueError):
    """A field cannot be length-prefixed (longer than 2^32-1 bytes)."""


@dataclass(frozen=True)
class RawUserId:
    """A user identifier as issued by one IdP: unique there, nowhere else."""

    idp_id: str
    uid: str

    def __post_init__(self) -> None:
        if not self.idp_id:
            raise ValueError("idp_id must be non-empty")
        if not self.uid:
            raise ValueError("uid must be non-empty")


@dataclass(frozen=True)
class BlindedIdentity:
    pre_uid: bytes
    uid_blinded: bytes
    tags: tuple[bytes, ...] = field(default_factory=tuple)


def prf(key: bytes, message: bytes) -> bytes:
    """Keyed PRF: HMAC-SHA256. Total function, 32-byte output."""
    return hmac.new(key, message, hashlib.sha256).digest()


def encode_fields(fields: Iterable[bytes]) -> bytes:
    """Injective encoding of an ordered field list.

    Each field is prefixed with its length as a 4-byte big-endian unsigned
    integer. Plain concatenation would admit splice collisions
    ("ali"+"ce1" vs "alice"+"1"); the length prefix rules those out.
    """
    out = bytearray()
    for f in fields:
        if len(f) > _MAX_FIELD:
            raise EncodingError("field exceeds 2^32-1 bytes")
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def _check_key(key: bytes) -> None:
    if len(key) != PRF_KEY_LEN:
        raise ValueError(f"PRF key must be {PRF_KEY_LEN} bytes, got {len(key)}")


def _check_salt(salt: bytes) -> None:
    if len(salt) != SALT_LEN:
        raise ValueError(f"salt must be {SALT_LEN} bytes, got {len(salt)}")


def derive_pre_uid(key: bytes, raw: RawUserId, cid_rp: str) -> bytes:
    """Salt-table lookup key for one user at one RP.

    Binds (idp_id, uid, cid_rp) so the same raw id at two RPs gets two
    independent salt rows.
    """
    _check_key(key)
    return prf(key, encode_fields([raw.idp_id.encode(), raw.uid.encode(), cid_rp.encode()]))


def derive_uid(key: bytes, raw: RawUserId, cid_rp: str, salt: bytes) -> bytes:
    """The blinded identifier an RP sees: PRF over (idp_id, uid, cid_rp, salt)."""
    _check_key(key)
    _check_salt(salt)
    return prf(
        key,
        encode_fields([raw.idp_id.encode(), raw.uid.encode(), cid_rp.encode(), salt]),
    )


def derive_multi_pre_uid(key: bytes, raws: Sequence[RawUserId], cid_rp: str) -> bytes:
    """Salt-table key for a multi-IdP identity (all raw ids, in order)."""
    _check_key(key)
    if not raws:
        raise ValueError("raws must be non-empty")
    fields = []
    for raw in raws:
        fields.append(raw.idp_id.encode())
        fields.append(raw.uid.encode())
    fields.append(cid_rp.encode())
    return prf(key, encode_fields(fields))


def derive_multi_uid(key: bytes, raws: Sequence[RawUserId], cid_rp: str, salt: bytes) -> bytes:
    """Blinded identifier over an ordered set of raw ids plus cid and salt.

    Callers must canonically order `raws` (the mixer sorts by idp_id):
    the PRF input changes with the order, so an unordered upstream would
    split one user into several identities.
    """
    _check_key(key)
    _check_salt(salt)
    if not raws:
        raise ValueError("raws must be non-empty")
    fields = []
    for raw in raws:
        fields.append(raw.idp_id.encode())
        fields.append(raw.uid.encode())
    fields.append(cid_rp.encode())
    fields.append(salt)
    return prf(key, encode_fields(fields))


def derive_tag(key: bytes, raw: RawUserId) -> bytes:
    """Set-membership fingerprint of one raw id, for threshold matching.

    Deliberately excludes cid and salt: at sign-in time the mixer matches
    presented tags against enrolled tag sets without knowing which
    enrollment (if any) they belong to.
    """
    _check_key(key)
    return prf(key, encode_fields([raw.idp_id.encode(), raw.uid.encode()]))


def derive_client_id(nonce: bytes, redirect_uri: str) -> str:
    """Client identifier issued at RP registration: hex SHA-256 of (nonce, uri)."""
    return hashlib.sha256(encode_fields([nonce, redirect_uri.encode()])).hexdigest()


def gen_secret() -> bytes:
    """32 bytes from the OS CSPRNG (client secrets, salts, codes, tokens, states)."""
    return secrets.token_bytes(SECRET_LEN)


def to_b64url(raw: bytes) -> str:
    """base64url without padding; 32-byte inputs render as 43 chars."""
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


def to_hex(raw: bytes) -> str:
    return raw.hex()


def constant_time_eq(a: str | bytes, b: str | bytes) -> bool:
    if isinstance(a, str):
        a = a.encode()
    if isinstance(b, str):
        b = b.encode()
    return hmac.compare_digest(a, b)
