"""Software stand-in for attested execution and sealed storage.

Models the TEE surface the mixer depends on, not the hardware: a platform
holds one attestation signing key (Ed25519) and one sealing master secret,
both persisted as plain files under a platform directory. Real hardware
keeps these in fuses; here the simulation target is *behavior* -- sealed
blobs decrypt only under the right enclave identity, attestation reports
verify only untampered -- not resistance to a malicious host.

Enclave identity is a SHA-256 measurement of the installed program
descriptor, plus a signer id hashed from a configured signer name. Sealing
keys are derived per (mode, identity, label): MRENCLAVE scopes a blob to
one exact binary, MRSIGNER to any binary from the same signer.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .crypto import encode_fields, prf

MODE_MRENCLAVE = "mrenclave"
MODE_MRSIGNER = "mrsigner"

_MODE_BYTE = {MODE_MRENCLAVE: b"\x01", MODE_MRSIGNER: b"\x02"}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}

NONCE_LEN = 12


class SealTamperError(Exception):
    """Sealed blob failed authenticated decryption (tamper or wrong identity)."""


class UnknownEnclaveError(KeyError):
    pass


@dataclass(frozen=True)
class EnclaveIdentity:
    eid: str
    measurement: bytes
    signer_id: bytes


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    payload: bytes
    signature: bytes

    def to_dict(self) -> dict:
        return {
            "measurement": self.measurement.hex(),
            "payload": self.payload.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationReport":
        return cls(
            measurement=bytes.fromhex(d["measurement"]),
            payload=bytes.fromhex(d["payload"]),
            signature=bytes.fromhex(d["signature"]),
        )


@dataclass(frozen=True)
class SealedBlob:
    mode: str
    nonce: bytes
    ciphertext: bytes  # ciphertext plus 16-byte auth tag

    def to_bytes(self) -> bytes:
        return _MODE_BYTE[self.mode] + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        if len(raw) < 1 + NONCE_LEN + 16:
            raise SealTamperError("sealed blob truncated")
        mode = _BYTE_MODE.get(raw[:1])
        if mode is None:
            raise SealTamperError("unknown sealing mode byte")
        return cls(mode=mode, nonce=raw[1 : 1 + NONCE_LEN], ciphertext=raw[1 + NONCE_LEN :])


def measure(program_descriptor: bytes) -> bytes:
    return hashlib.sha256(program_descriptor).digest()


class EnclavePlatform:
    """One simulated TEE host: attestation keypair plus sealing master secret.

    Pointing several processes at the same platform directory makes them
    share a "host", so a restarted mixer can unseal its own state and
    presents the same attestation root to verifiers.
    """

    ATT_KEY_FILE = "att_signing.key"
    SEAL_KEY_FILE = "seal_master.key"

    def __init__(self, platform_dir: str | Path):
        self.platform_dir = Path(platform_dir)
        self.platform_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._enclaves: dict[str, EnclaveIdentity] = {}
        self._att_sk = Ed25519PrivateKey.from_private_bytes(
            self._load_or_create(self.ATT_KEY_FILE)
        )
        self._seal_master = self._load_or_create(self.SEAL_KEY_FILE)

    def _load_or_create(self, name: str) -> bytes:
        path = self.platform_dir / name
        if path.exists():
            raw = path.read_bytes()
            if len(raw) != 32:
                raise SealTamperError(f"platform key file {name} corrupted")
            return raw
        raw = secrets.token_bytes(32)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(raw)
        os.replace(tmp, path)
        return raw

    # -- attestation ------------------------------------------------------

    def getpk(self) -> bytes:
        """Platform attestation verification key, as any party may query it."""
        return self._att_sk.public_key().public_bytes_raw()

    def install(self, program_descriptor: bytes, signer_name: str) -> EnclaveIdentity:
        if not program_descriptor:
            raise ValueError("program descriptor must be non-empty")
        ident = EnclaveIdentity(
            eid=secrets.token_hex(8),
            measurement=measure(program_descriptor),
            signer_id=hashlib.sha256(signer_name.encode()).digest(),
        )
        with self._lock:
            self._enclaves[ident.eid] = ident
        return ident

    def _get(self, eid: str) -> EnclaveIdentity:
        with self._lock:
            try:
                return self._enclaves[eid]
            except KeyError:
                raise UnknownEnclaveError(eid) from None

    def attest(self, eid: str, payload: bytes) -> AttestationReport:
        """Sign (measurement, payload) with the platform key."""
        ident = self._get(eid)
        message = encode_fields([ident.measurement, payload])
        return AttestationReport(
            measurement=ident.measurement,
            payload=payload,
            signature=self._att_sk.sign(message),
        )

    # -- sealing ----------------------------------------------------------

    def _seal_key(self, ident: EnclaveIdentity, label: str, mode: str) -> bytes:
        identity = ident.measurement if mode == MODE_MRENCLAVE else ident.signer_id
        return prf(self._seal_master, encode_fields([_MODE_BYTE[mode], identity, label.encode()]))

    def seal(self, eid: str, label: str, plaintext: bytes, mode: str = MODE_MRENCLAVE) -> SealedBlob:
        if mode not in _MODE_BYTE:
            raise ValueError(f"unknown sealing mode {mode!r}")
        ident = self._get(eid)
        nonce = secrets.token_bytes(NONCE_LEN)
        ct = AESGCM(self._seal_key(ident, label, mode)).encrypt(nonce, plaintext, label.encode())
        return SealedBlob(mode=mode, nonce=nonce, ciphertext=ct)

    def unseal(self, eid: str, label: str, blob: SealedBlob) -> bytes:
        ident = self._get(eid)
        try:
            return AESGCM(self._seal_key(ident, label, blob.mode)).decrypt(
                blob.nonce, blob.ciphertext, label.encode()
            )
        except InvalidTag:
            raise SealTamperError(f"unseal failed for label {label!r}") from None

    # -- sealed files -----------------------------------------------------

    def seal_to_file(self, eid: str, state_dir: str | Path, label: str, plaintext: bytes,
                     mode: str = MODE_MRENCLAVE) -> Path:
        """Persist a sealed blob as <label>.sealed, atomically."""
        path = Path(state_dir) / f"{label}.sealed"
        blob = self.seal(eid, label, plaintext, mode)
        tmp = path.with_suffix(".sealed.tmp")
        tmp.write_bytes(blob.to_bytes())
        os.replace(tmp, path)
        return path

    def unseal_from_file(self, eid: str, state_dir: str | Path, label: str) -> bytes | None:
        """Read and unseal <label>.sealed; None when absent, SealTamperError on tamper."""
        path = Path(state_dir) / f"{label}.sealed"
        if not path.exists():
            return None
        return self.unseal(eid, label, SealedBlob.from_bytes(path.read_bytes()))


def verify_attestation(pk_tee: bytes, report: AttestationReport, expected_measurement: bytes) -> bool:
    """True iff the signature is valid and the measurement is the expected one.

    Returns False (never raises) on malformed input so callers can treat
    any verification problem uniformly as "do not trust".
    """
    try:
        if report.measurement != expected_measurement:
            return False
        message = encode_fields([report.measurement, report.payload])
        Ed25519PublicKey.from_public_bytes(pk_tee).verify(report.signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False
