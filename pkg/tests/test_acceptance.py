"""Acceptance criteria for the whole system, one test per criterion.

Each criterion prints a PASS/FAIL line. Most run against a real
multi-process stack (3 IdPs, 2 RPs, a baseline RP, TLS mixer) brought up
through the deployment controller; crypto and sealing conformance run
in-process. Stated runtime budgets are asserted too.
"""

import hashlib
import hmac
import json
import random
import struct
import time
import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import pytest
import requests

from miso import crypto
from miso.config import Config
from miso.crypto import RawUserId
from miso.enclave import (
    MODE_MRENCLAVE,
    MODE_MRSIGNER,
    AttestationReport,
    EnclavePlatform,
    SealTamperError,
    verify_attestation,
)
from miso.harness.driver import StackHandle, UserAgent, drive_login
from miso.harness.games import run_subset_oracle
from miso.harness.load import run_load
from miso.stack import StackController, Topology

BASE_PORT = 10100


@contextmanager
def criterion(name: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE FAIL  {name}  ({time.monotonic() - started:.1f}s)")
        raise
    print(f"\nACCEPTANCE PASS  {name}  ({time.monotonic() - started:.1f}s)")


@pytest.fixture(scope="module")
def controller(tmp_path_factory):
    ctl = StackController(tmp_path_factory.mktemp("accept") / "stack")
    ctl.up(Topology(idps=3, rps=2, users=256, base_port=BASE_PORT,
                    pbkdf2_iterations=2000))
    yield ctl
    ctl.down(wipe=False)


@pytest.fixture(scope="module")
def stack(controller) -> StackHandle:
    return StackHandle(controller.read_descriptor())


def test_determinism_and_per_rp_blinding(controller, stack):
    with criterion("determinism & per-RP blinding (incl. mixer restart)"):
        started = time.monotonic()
        user = stack.user("user0021")
        subs = set()
        for _ in range(20):
            outcome = drive_login(stack, "rp0", user["username"], user["password"])
            assert outcome.ok, outcome.error
            subs.add(outcome.sub)
        assert len(subs) == 1, f"sub changed across repeated logins: {subs}"
        sub_rp0 = subs.pop()

        other = drive_login(stack, "rp1", user["username"], user["password"])
        assert other.ok and other.sub != sub_rp0, "same sub at two RPs"

        controller.restart_mixer()
        again = drive_login(stack, "rp0", user["username"], user["password"])
        assert again.ok, again.error
        assert again.sub == sub_rp0, "sub changed across mixer restart"
        assert time.monotonic() - started < 30


def test_transcript_privacy(controller, stack):
    with criterion("transcript privacy (IdP sees cid_mixer only; RP sees sub only)"):
        started = time.monotonic()
        rng = random.Random(20260809)
        users = [stack.user("alice"), stack.user("bob")]
        rps = stack.rp_names[:2]

        mixer_config = Config.load(controller.read_descriptor()["mixer"]["config"])
        cid_mixer = {i: entry["client_id"] for i, entry in mixer_config.idp_entries().items()}
        cid_rp = {}
        for rp in rps:
            creds = json.loads((controller.state_dir / rp / "credentials.json").read_text())
            cid_rp[rp] = creds["client_id"]

        forbidden_at_rp = []
        for user in users:
            forbidden_at_rp += list(user["uids"].values())
            forbidden_at_rp += list(user["emails"].values())
            forbidden_at_rp += [f'{user["username"].title()} ({i})' for i in stack.idp_ids]

        idp_name_sets_by_rp = {rp: set() for rp in rps}
        violations = []
        for trial in range(50):
            user = users[rng.randint(0, 1)]
            rp = rps[rng.randint(0, 1)]
            for idp_id in stack.idp_ids:
                stack.transcript(stack.idp_url(idp_id), clear=True)
            stack.transcript(stack.rp_url(rp), clear=True)
            outcome = drive_login(stack, rp, user["username"], user["password"])
            if not outcome.ok:
                violations.append(f"trial {trial}: login failed ({outcome.error})")
                continue

            idp_entries = []
            for idp_id in stack.idp_ids:
                idp_entries += stack.transcript(stack.idp_url(idp_id))
            idp_view = json.dumps(idp_entries)
            # (a) IdP sees the mixer's client id, never any RP's
            seen_cids = {e["params"]["client_id"] for e in idp_entries
                         if e["direction"] == "in" and "client_id" in e.get("params", {})}
            if not seen_cids <= set(cid_mixer.values()):
                violations.append(f"trial {trial}: unexpected client_id at IdP: {seen_cids}")
            for rp_name, cid in cid_rp.items():
                if cid in idp_view:
                    violations.append(f"trial {trial}: {rp_name} cid leaked to IdP")
            # (c) parameter-name sets at the IdP, grouped by originating RP
            signature = tuple(
                (e["method"], e["endpoint"], tuple(sorted(e.get("params", {}))))
                for e in idp_entries if e["direction"] == "in"
            )
            idp_name_sets_by_rp[rp].add(signature)

            # (b) RP view contains no raw uid, email, or attribute value
            rp_view = json.dumps(stack.transcript(stack.rp_url(rp)))
            rp_view += json.dumps(outcome.attributes) + (outcome.sub or "")
            for needle in forbidden_at_rp:
                if needle in rp_view:
                    violations.append(f"trial {trial}: {needle!r} leaked to {rp}")

        assert not violations, violations
        assert idp_name_sets_by_rp[rps[0]] == idp_name_sets_by_rp[rps[1]], (
            "IdP request shapes differ by originating RP"
        )
        assert time.monotonic() - started < 120


def test_multi_idp_subset_oracle(stack):
    with criterion("2-of-3 threshold subset oracle"):
        started = time.monotonic()
        report = run_subset_oracle(stack, username="carol", idps=stack.idp_ids[:3], m=2)
        assert report["enrolled"], report.get("error")
        assert len(report["outcomes"]) == 7
        for subset, expect_ok in report["expected"].items():
            outcome = report["outcomes"][subset]
            assert outcome["ok"] == expect_ok, (subset, outcome)
            if expect_ok:
                assert outcome["sub"] == report["enroll_sub"], (subset, outcome)
            else:
                assert outcome["error"] == "threshold_not_met", (subset, outcome)
        assert time.monotonic() - started < 60


def test_crypto_conformance():
    with criterion("PRF and derivation golden vectors"):
        rfc4231 = [
            (bytes([0x0B]) * 20, b"Hi There",
             "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
            (b"Jefe", b"what do ya want for nothing?",
             "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
            (bytes([0xAA]) * 20, bytes([0xDD]) * 50,
             "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
            (bytes(range(1, 26)), bytes([0xCD]) * 50,
             "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
        ]
        for key, message, digest in rfc4231:
            assert crypto.prf(key, message).hex() == digest

        def lp(b: bytes) -> bytes:  # independent length-prefix oracle
            return struct.pack(">I", len(b)) + b

        zero_key, salt = bytes(32), bytes([1]) * 32
        raw = RawUserId("idp-a", "alice")

        oracle = hmac.new(zero_key, lp(b"idp-a") + lp(b"alice") + lp(b"cid-1"),
                          hashlib.sha256).hexdigest()
        assert oracle == "76b0976ee24c645d0f9c2edfe13295ecd0cfe4931d88f590fdc3f241aadc3873"
        assert crypto.derive_pre_uid(zero_key, raw, "cid-1").hex() == oracle

        oracle = hmac.new(zero_key, lp(b"idp-a") + lp(b"alice") + lp(b"cid-1") + lp(salt),
                          hashlib.sha256).hexdigest()
        assert oracle == "4de3556947f8e5c07be7d1ef61d48e60b492f4dd94752991351e35eab353ebc6"
        assert crypto.derive_uid(zero_key, raw, "cid-1", salt).hex() == oracle

        raws = [RawUserId("idp-a", "alice"), RawUserId("idp-b", "alice-b"),
                RawUserId("idp-c", "alice-c")]
        message = b"".join(lp(r.idp_id.encode()) + lp(r.uid.encode()) for r in raws)
        oracle = hmac.new(zero_key, message + lp(b"cid-1") + lp(salt),
                          hashlib.sha256).hexdigest()
        assert oracle == "52ead736b1ce9177e1694de850865d99fac712478cc479b28d7c69ea1a2b4764"
        assert crypto.derive_multi_uid(zero_key, raws, "cid-1", salt).hex() == oracle


def test_sealing_and_attestation(tmp_path):
    with criterion("sealing round trips, isolation, attestation tamper resistance"):
        started = time.monotonic()
        platform = EnclavePlatform(tmp_path / "platform")
        rng = random.Random(5150)

        enclave = platform.install(b"accept-prog", "accept-signer")
        for _ in range(100):
            mode = rng.choice([MODE_MRENCLAVE, MODE_MRSIGNER])
            label = f"rec-{rng.randint(0, 99)}"
            plaintext = rng.randbytes(rng.randint(0, 512))
            blob = platform.seal(enclave.eid, label, plaintext, mode)
            assert platform.unseal(enclave.eid, label, blob) == plaintext

        for _ in range(10):
            a = platform.install(rng.randbytes(24), "accept-signer")
            b = platform.install(rng.randbytes(24), "accept-signer")
            blob = platform.seal(a.eid, "x", b"secret", MODE_MRENCLAVE)
            with pytest.raises(SealTamperError):
                platform.unseal(b.eid, "x", blob)

        report = platform.attest(enclave.eid, b"attested server key bytes")
        pk = platform.getpk()
        assert verify_attestation(pk, report, enclave.measurement)
        for _ in range(1000):
            m = bytearray(report.measurement)
            p = bytearray(report.payload)
            s = bytearray(report.signature)
            which = rng.choice([m, p, s])
            which[rng.randrange(len(which))] ^= rng.randint(1, 255)
            tampered = AttestationReport(bytes(m), bytes(p), bytes(s))
            assert not verify_attestation(pk, tampered, enclave.measurement)
        assert time.monotonic() - started < 30


def test_oauth_hygiene(tmp_path):
    with criterion("code replay, token expiry, bad secret, stale-state CSRF"):
        from conftest import build_stack
        local = build_stack(tmp_path / "hygiene", n_idps=1, n_rps=1,
                            mixer_overrides={"token_lifetime_s": "1"})
        try:
            handle = local.handle()
            rp = local.rps["rp0"]
            mixer_url = local.mixer.base_url

            def fresh_code() -> str:
                ua = UserAgent("alice", "pw-alice")
                out = ua.navigate(f"{rp.base_url}/login/start",
                                  stop_prefix=f"{rp.base_url}/cb")
                ua.close()
                assert out.stopped_at
                q = urllib.parse.parse_qs(urllib.parse.urlsplit(out.stopped_at).query)
                return q["code"][0]

            def redeem(code: str, secret: str | None = None):
                return requests.post(f"{mixer_url}/token_mixer", data={
                    "grant_type": "authorization_code",
                    "code": code,
                    "redirect_uri": rp.redirect_uri,
                    "client_id": rp.client_id,
                    "client_secret": secret if secret is not None else rp.client_secret,
                })

            # code replay: first redemption wins, every replay is invalid_grant
            for _ in range(20):
                code = fresh_code()
                assert redeem(code).status_code == 200
                replay = redeem(code)
                assert replay.status_code == 400
                assert replay.json() == {"error": "invalid_grant"}

            # token expiry: token_lifetime_s=1, so all of these are dead
            tokens = [redeem(fresh_code()).json()["access_token"] for _ in range(20)]
            time.sleep(1.2)
            for token in tokens:
                resp = requests.get(f"{mixer_url}/res_mixer",
                                    headers={"Authorization": f"Bearer {token}"})
                assert resp.status_code == 401
                assert resp.json() == {"error": "invalid_token"}

            # wrong client secret: always invalid_client, never burns the code
            rng = random.Random(77)
            code = fresh_code()
            for _ in range(20):
                wrong = crypto.to_b64url(rng.randbytes(32))
                resp = redeem(code, secret=wrong)
                assert resp.status_code == 401
                assert resp.json() == {"error": "invalid_client"}
            assert redeem(code).status_code == 200

            # stale-state CSRF at the RP callback
            for i in range(20):
                ua = UserAgent("alice", "pw-alice")
                assert ua.request("GET", f"{rp.base_url}/login/start").status_code == 302
                forged = ua.request(
                    "GET", f"{rp.base_url}/cb?code=forged&state=wrong-{i}")
                assert forged.status_code == 403
                ua.close()
        finally:
            local.stop()


def test_latency_ratio(controller, stack):
    with criterion("latency ratio: nested flow vs basic SSO"):
        stack.clear_transcripts()
        # a multi-second scheduler stall on the shared box corrupts a 30 s
        # window; one full re-measurement of the pair is allowed, a second
        # out-of-band result fails
        ratio = None
        for attempt in (1, 2):
            baseline = run_load(stack, "baseline_sso", rate=50, duration_s=30, pool_size=100)
            single = run_load(stack, "miso_single", rate=50, duration_s=30, pool_size=100)
            assert baseline["errors"] == 0, baseline["error_samples"]
            assert single["errors"] == 0, single["error_samples"]
            ratio = single["mean_ms"] / baseline["mean_ms"]
            print(f"\n  attempt {attempt}: baseline={baseline['mean_ms']:.1f}ms "
                  f"single={single['mean_ms']:.1f}ms ratio={ratio:.2f}")
            if 1.5 <= ratio <= 3.5:
                break
            time.sleep(2)
        assert 1.5 <= ratio <= 3.5, f"ratio {ratio:.2f} outside [1.5, 3.5]"

        # threshold logins cost more than single logins at the same rate
        time.sleep(2)
        single_lo = run_load(stack, "miso_single", rate=10, duration_s=15, pool_size=50)
        multi_lo = run_load(stack, "miso_multi_2of3", rate=10, duration_s=15, pool_size=50)
        assert single_lo["errors"] == 0, single_lo["error_samples"]
        assert multi_lo["errors"] == 0, multi_lo["error_samples"]
        print(f"  at 10/s: single={single_lo['mean_ms']:.1f}ms multi={multi_lo['mean_ms']:.1f}ms")
        assert multi_lo["mean_ms"] > single_lo["mean_ms"]


def test_concurrency_soak(stack):
    with criterion("200 concurrent in-flight logins, no errors, no sub collisions"):
        started = time.monotonic()
        users = [u for u in stack.users() if u["username"].startswith("user")][:200]
        assert len(users) == 200

        def login(user):
            return drive_login(stack, "rp0", user["username"], user["password"])

        with ThreadPoolExecutor(max_workers=200) as pool:
            outcomes = list(pool.map(login, users))
        failures = [o.error for o in outcomes if not o.ok]
        assert not failures, f"{len(failures)} failed logins: {failures[:5]}"
        subs = [o.sub for o in outcomes]
        assert len(set(subs)) == len(subs), "sub collision across distinct users"
        assert time.monotonic() - started < 120
