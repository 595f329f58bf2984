"""Attested execution and sealing behavior."""

import hashlib
import random

import pytest

from miso.enclave import (
    MODE_MRENCLAVE,
    MODE_MRSIGNER,
    AttestationReport,
    EnclavePlatform,
    SealedBlob,
    SealTamperError,
    verify_attestation,
)


@pytest.fixture
def platform(tmp_path):
    return EnclavePlatform(tmp_path / "platform")


class TestInstall:
    def test_same_descriptor_same_measurement_distinct_eids(self, platform):
        a = platform.install(b"prog-v1", "signer")
        b = platform.install(b"prog-v1", "signer")
        assert a.measurement == b.measurement
        assert a.eid != b.eid

    def test_different_descriptor_different_measurement(self, platform):
        a = platform.install(b"prog-v1", "signer")
        b = platform.install(b"prog-v2", "signer")
        assert a.measurement != b.measurement

    def test_measurement_matches_sha256(self, platform):
        ident = platform.install(b"miso-mixer-v1", "signer")
        assert ident.measurement == hashlib.sha256(b"miso-mixer-v1").digest()
        assert ident.measurement.hex() == \
            "1fa29cbaeae27a7566254a6427e9f36930efab9d9dee6f0a99fd171154dd9f90"

    def test_empty_descriptor_rejected(self, platform):
        with pytest.raises(ValueError):
            platform.install(b"", "signer")


class TestAttestation:
    def test_round_trip(self, platform):
        ident = platform.install(b"prog", "signer")
        report = platform.attest(ident.eid, b"server-public-key")
        assert verify_attestation(platform.getpk(), report, ident.measurement)

    def test_payload_tamper_fails(self, platform):
        ident = platform.install(b"prog", "signer")
        report = platform.attest(ident.eid, b"payload")
        bad = AttestationReport(report.measurement, b"payloae", report.signature)
        assert not verify_attestation(platform.getpk(), bad, ident.measurement)

    def test_wrong_expected_measurement_fails(self, platform):
        ident = platform.install(b"prog", "signer")
        report = platform.attest(ident.eid, b"payload")
        assert not verify_attestation(platform.getpk(), report, hashlib.sha256(b"other").digest())

    def test_zeroed_signature_fails(self, platform):
        ident = platform.install(b"prog", "signer")
        report = platform.attest(ident.eid, b"payload")
        bad = AttestationReport(report.measurement, report.payload, bytes(len(report.signature)))
        assert not verify_attestation(platform.getpk(), bad, ident.measurement)

    def test_unknown_eid(self, platform):
        with pytest.raises(KeyError):
            platform.attest("no-such-eid", b"payload")

    def test_random_single_byte_tampers_all_fail(self, platform):
        ident = platform.install(b"prog", "signer")
        report = platform.attest(ident.eid, b"some attested payload")
        rng = random.Random(99)
        for _ in range(300):
            m, p, s = bytearray(report.measurement), bytearray(report.payload), bytearray(report.signature)
            which = rng.choice([m, p, s])
            i = rng.randrange(len(which))
            flip = rng.randint(1, 255)
            which[i] ^= flip
            tampered = AttestationReport(bytes(m), bytes(p), bytes(s))
            assert not verify_attestation(platform.getpk(), tampered, ident.measurement)


class TestSealing:
    def test_round_trip_both_modes(self, platform):
        ident = platform.install(b"prog", "signer")
        rng = random.Random(5)
        for _ in range(100):
            mode = rng.choice([MODE_MRENCLAVE, MODE_MRSIGNER])
            label = f"label-{rng.randint(0, 9)}"
            plaintext = rng.randbytes(rng.randint(0, 200))
            blob = platform.seal(ident.eid, label, plaintext, mode)
            assert platform.unseal(ident.eid, label, blob) == plaintext

    def test_mrenclave_isolated_across_measurements(self, platform):
        rng = random.Random(6)
        for _ in range(10):
            a = platform.install(rng.randbytes(16), "signer")
            b = platform.install(rng.randbytes(16), "signer")
            blob = platform.seal(a.eid, "lbl", b"secret", MODE_MRENCLAVE)
            with pytest.raises(SealTamperError):
                platform.unseal(b.eid, "lbl", blob)

    def test_mrsigner_shared_across_same_signer(self, platform):
        a = platform.install(b"prog-v1", "acme")
        b = platform.install(b"prog-v2", "acme")
        blob = platform.seal(a.eid, "lbl", b"secret", MODE_MRSIGNER)
        assert platform.unseal(b.eid, "lbl", blob) == b"secret"

    def test_mrsigner_isolated_across_signers(self, platform):
        a = platform.install(b"prog-v1", "acme")
        b = platform.install(b"prog-v1", "evil")
        blob = platform.seal(a.eid, "lbl", b"secret", MODE_MRSIGNER)
        # same binary, different signer: MRSIGNER must not carry over
        with pytest.raises(SealTamperError):
            platform.unseal(b.eid, "lbl", blob)

    def test_ciphertext_tamper(self, platform):
        ident = platform.install(b"prog", "signer")
        blob = platform.seal(ident.eid, "lbl", b"secret")
        bad = SealedBlob(blob.mode, blob.nonce, blob.ciphertext[:-1] + bytes([blob.ciphertext[-1] ^ 1]))
        with pytest.raises(SealTamperError):
            platform.unseal(ident.eid, "lbl", bad)

    def test_wrong_label(self, platform):
        ident = platform.install(b"prog", "signer")
        blob = platform.seal(ident.eid, "lbl", b"secret")
        with pytest.raises(SealTamperError):
            platform.unseal(ident.eid, "other", blob)

    def test_nonce_uniqueness(self, platform):
        ident = platform.install(b"prog", "signer")
        nonces = {platform.seal(ident.eid, "lbl", b"x").nonce for _ in range(10_000)}
        assert len(nonces) == 10_000

    def test_file_layout(self, platform, tmp_path):
        ident = platform.install(b"prog", "signer")
        path = platform.seal_to_file(ident.eid, tmp_path, "prf_key", b"\x01\x02", MODE_MRSIGNER)
        raw = path.read_bytes()
        assert path.name == "prf_key.sealed"
        assert raw[0] == 0x02  # mode byte: mrsigner
        assert len(raw) == 1 + 12 + len(b"\x01\x02") + 16
        assert platform.unseal_from_file(ident.eid, tmp_path, "prf_key") == b"\x01\x02"

    def test_file_tamper(self, platform, tmp_path):
        ident = platform.install(b"prog", "signer")
        path = platform.seal_to_file(ident.eid, tmp_path, "prf_key", b"secret")
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(SealTamperError):
            platform.unseal_from_file(ident.eid, tmp_path, "prf_key")

    def test_missing_file_returns_none(self, platform, tmp_path):
        ident = platform.install(b"prog", "signer")
        assert platform.unseal_from_file(ident.eid, tmp_path, "nope") is None


class TestPlatformPersistence:
    def test_keys_stable_across_instances(self, tmp_path):
        a = EnclavePlatform(tmp_path / "p")
        b = EnclavePlatform(tmp_path / "p")
        assert a.getpk() == b.getpk()
        ident_a = a.install(b"prog", "signer")
        ident_b = b.install(b"prog", "signer")
        blob = a.seal(ident_a.eid, "lbl", b"secret")
        assert b.unseal(ident_b.eid, "lbl", blob) == b"secret"

    def test_distinct_hosts_cannot_unseal(self, tmp_path):
        a = EnclavePlatform(tmp_path / "host-a")
        b = EnclavePlatform(tmp_path / "host-b")
        ident_a = a.install(b"prog", "signer")
        ident_b = b.install(b"prog", "signer")
        blob = a.seal(ident_a.eid, "lbl", b"secret")
        with pytest.raises(SealTamperError):
            b.unseal(ident_b.eid, "lbl", blob)
