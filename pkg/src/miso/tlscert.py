"""Self-signed loopback certificates for the mixer's TLS endpoint.

The certificate is scaffolding: clients trust the *key*, which is bound
to the enclave measurement by the attestation report. The certificate is
built deterministically (fixed validity window, serial derived from the
key, deterministic Ed25519 signature), so rebuilding it from the same
sealed key after a restart yields byte-identical PEM and every pinned
trust anchor stays valid.
"""

from __future__ import annotations

import datetime
import hashlib
import ipaddress

from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.x509.oid import NameOID

_NOT_BEFORE = datetime.datetime(2000, 1, 1, tzinfo=datetime.timezone.utc)
_NOT_AFTER = datetime.datetime(2100, 1, 1, tzinfo=datetime.timezone.utc)


def self_signed_cert_pem(private_key: Ed25519PrivateKey, common_name: str) -> tuple[bytes, bytes]:
    """(cert_pem, key_pem) for a loopback server certificate."""
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    pub_raw = private_key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    serial = int.from_bytes(hashlib.sha256(pub_raw).digest()[:16], "big")
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(private_key.public_key())
        .serial_number(serial)
        .not_valid_before(_NOT_BEFORE)
        .not_valid_after(_NOT_AFTER)
        .add_extension(x509.SubjectAlternativeName([
            x509.IPAddress(ipaddress.ip_address("127.0.0.1")),
            x509.DNSName("localhost"),
        ]), critical=False)
        .sign(private_key, None)
    )
    cert_pem = cert.public_bytes(serialization.Encoding.PEM)
    key_pem = private_key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    return cert_pem, key_pem


def cert_public_key_raw(cert_pem: bytes) -> bytes:
    """Raw public key bytes from a PEM certificate (for pin comparison)."""
    cert = x509.load_pem_x509_certificate(cert_pem)
    return cert.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
