"""The mixer: an identity broker that runs inside a (simulated) enclave.

Toward relying parties it is an OAuth 2.0 provider (/auth_mixer,
/token_mixer, /res_mixer); toward identity providers it is an ordinary
OAuth 2.0 client. A login nests the two: the RP's authorization request
opens a session, the user authenticates at one or more IdPs through
redirects, and the mixer closes the outer flow with a single-use code.

What the RP finally learns is a blinded identifier: a PRF image of the
raw IdP user id, the RP's client id, and a per-user salt. The PRF key,
salt table, threshold enrollment records, client registry, and disclosure
policies are sealed to the enclave identity before they touch disk.

Threshold logins (m-of-n): when the RP supplies `idp_list`, the mixer
collects one raw id per listed IdP. First sign-on enrolls the set: a
per-id tag vector plus the blinded identifier are stored sealed. Later
sign-ons match presented tags against enrolled records and require at
least the enrolled threshold to agree before releasing the identifier.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import crypto, tlscert
from .config import Config, ConfigError
from .crypto import RawUserId, constant_time_eq, gen_secret, to_b64url
from .enclave import MODE_MRENCLAVE, MODE_MRSIGNER, EnclavePlatform, SealTamperError
from .webbase import HttpService, Request, Response

log = logging.getLogger("miso.mixer")

CODE_LIFETIME_S = 600
TOKEN_LIFETIME_S = 3600
SESSION_LIFETIME_S = 900

DEFAULT_PROGRAM_DESCRIPTOR = "miso-mixer-v1"
DEFAULT_SIGNER_NAME = "miso-dev-signer"
DEFAULT_ATTRIBUTE_NAMES = ("email", "display_name")

PHASE_AWAIT_IDP = "AwaitIdpAuth"
PHASE_AWAIT_NEXT = "AwaitNextIdp"
PHASE_FINALIZED = "Finalized"
PHASE_FAILED = "Failed"


@dataclass
class LoginSession:
    session_id: str
    cid_rp: str
    redirect_uri: str
    state_rp: str
    mode: str  # "single" | "multi"
    idp_list: list[str]
    threshold: int
    pending: list[str]
    created_at: float
    raws: list[RawUserId] = field(default_factory=list)
    attributes: dict[str, str] = field(default_factory=dict)
    phase: str = PHASE_AWAIT_IDP
    pre_uid: bytes | None = None
    uid_blinded: bytes | None = None


@dataclass
class TagRecord:
    tag_set: set[str]  # hex tags
    n: int
    m: int
    cid_rp: str
    uid_blinded: str  # hex
    pre_uid: str  # hex; lets phase-II logins resolve disclosure policies

    def to_dict(self) -> dict:
        return {"tag_set": sorted(self.tag_set), "n": self.n, "m": self.m,
                "cid_rp": self.cid_rp, "uid_blinded": self.uid_blinded, "pre_uid": self.pre_uid}

    @classmethod
    def from_dict(cls, d: dict) -> "TagRecord":
        return cls(tag_set=set(d["tag_set"]), n=d["n"], m=d["m"], cid_rp=d["cid_rp"],
                   uid_blinded=d["uid_blinded"], pre_uid=d["pre_uid"])


class MixerService(HttpService):
    kind = "mixer"

    def __init__(self, config: Config):
        super().__init__(config)
        self.state_dir = Path(config.require("state_dir"))
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.seal_mode = config.get("seal_mode", MODE_MRENCLAVE)
        if self.seal_mode not in (MODE_MRENCLAVE, MODE_MRSIGNER):
            raise ConfigError(f"seal_mode must be mrenclave or mrsigner, got {self.seal_mode!r}")
        self.code_lifetime = config.get_int("code_lifetime_s", CODE_LIFETIME_S)
        self.token_lifetime = config.get_int("token_lifetime_s", TOKEN_LIFETIME_S)
        self.session_lifetime = config.get_int("session_lifetime_s", SESSION_LIFETIME_S)
        self.public_url = config.get("public_url")
        allowed = config.get("allowed_attributes")
        self.attribute_names = tuple(
            a.strip() for a in allowed.split(",") if a.strip()
        ) if allowed else DEFAULT_ATTRIBUTE_NAMES

        # harness-only fault injection; must never be on outside debug runs
        self.debug_leak_cid_rp = self.debug and config.get_bool("debug_leak_cid_rp")
        self.debug_identity_prf = self.debug and config.get_bool("debug_identity_prf")

        self.idps = config.idp_entries()
        for idp_id, entry in self.idps.items():
            for key in ("auth_url", "token_url", "res_url", "client_id", "client_secret"):
                if key not in entry:
                    raise ConfigError(f"idp.{idp_id}.{key} missing from config")
        self.default_idp = config.get("default_idp") or (sorted(self.idps)[0] if self.idps else None)

        self.platform = EnclavePlatform(config.require("platform_dir"))
        descriptor = config.get("program_descriptor", DEFAULT_PROGRAM_DESCRIPTOR)
        self.enclave = self.platform.install(descriptor.encode(), config.get("signer_name", DEFAULT_SIGNER_NAME))

        self._tables_lock = threading.RLock()
        self._sessions_lock = threading.Lock()
        self.prf_key = self._load_or_create_secret("prf_key")
        self._server_sk = Ed25519PrivateKey.from_private_bytes(self._load_or_create_secret("server_key"))
        self.pk_server = self._server_sk.public_key().public_bytes_raw()
        self.rp_registry: dict[str, dict] = self._load_json_table("rp_registry", {})
        self.salt_table: dict[str, str] = self._load_json_table("salt_table", {})
        self.tag_table: list[TagRecord] = [
            TagRecord.from_dict(d) for d in self._load_json_table("tag_table", [])
        ]
        self.policies: dict[str, list[str]] = self._load_json_table("policies", {})
        # the IdP credential registry also lives sealed, mirroring the config
        self._seal_json("idp_registry", self.idps)

        self._sessions: dict[str, LoginSession] = {}
        self._states: dict[str, tuple[str, str]] = {}  # state_mixer -> (session_id, idp_id)
        self._codes: dict[str, dict] = {}
        self._tokens: dict[str, dict] = {}
        self._last_prune = 0.0

        self.route("GET", "/attestation", self.handle_attestation)
        self.route("POST", "/register", self.handle_register)
        self.route("GET", "/auth_mixer", self.handle_auth)
        self.route("GET", "/callback", self.handle_idp_callback)
        self.route("POST", "/token_mixer", self.handle_token)
        self.route("GET", "/res_mixer", self.handle_resource)
        self.route("GET", "/policy", self.handle_policy_get)
        self.route("POST", "/policy", self.handle_policy_set)
        if self.debug:
            self.route("GET", "/debug/sessions", self.handle_debug_sessions)

    def start(self) -> None:
        """Bring up the listener; in TLS mode, terminate with the attested key.

        The certificate is rebuilt each boot from the sealed server key, so
        verifiers that pinned pk_server keep matching across restarts. The
        key PEM exists on disk only for the instant the TLS stack loads it
        (a simulation concession; a real enclave never exports it).
        """
        if self.config.get_bool("tls") and not self.config.get("tls_cert"):
            cert_pem, key_pem = tlscert.self_signed_cert_pem(self._server_sk, "miso-mixer")
            cert_path = self.state_dir / "server_cert.pem"
            key_path = self.state_dir / "server_key.pem"
            cert_path.write_bytes(cert_pem)
            key_path.write_bytes(key_pem)
            key_path.chmod(0o600)
            self.config.values["tls_cert"] = str(cert_path)
            self.config.values["tls_key"] = str(key_path)
            try:
                super().start()
            finally:
                key_path.unlink(missing_ok=True)
            return
        super().start()

    # -- sealed state ---------------------------------------------------------

    def _load_or_create_secret(self, label: str) -> bytes:
        raw = self.platform.unseal_from_file(self.enclave.eid, self.state_dir, label)
        if raw is None:
            raw = gen_secret()
            self.platform.seal_to_file(self.enclave.eid, self.state_dir, label, raw, self.seal_mode)
        return raw

    def _load_json_table(self, label: str, default):
        raw = self.platform.unseal_from_file(self.enclave.eid, self.state_dir, label)
        if raw is None:
            return default
        return json.loads(raw.decode())

    def _seal_json(self, label: str, value) -> None:
        self.platform.seal_to_file(
            self.enclave.eid, self.state_dir, label, json.dumps(value).encode(), self.seal_mode
        )

    def _persist_tables(self, *labels: str) -> None:
        with self._tables_lock:
            if "rp_registry" in labels:
                self._seal_json("rp_registry", self.rp_registry)
            if "salt_table" in labels:
                self._seal_json("salt_table", self.salt_table)
            if "tag_table" in labels:
                self._seal_json("tag_table", [r.to_dict() for r in self.tag_table])
            if "policies" in labels:
                self._seal_json("policies", self.policies)

    # -- identity derivations --------------------------------------------------

    def _blind(self, raws: list[RawUserId], cid_rp: str, salt: bytes) -> bytes:
        if self.debug_identity_prf:
            # fault injection: no blinding at all; unlinkability games must catch this
            joined = ",".join(f"{r.idp_id}:{r.uid}" for r in raws).encode()
            return joined[:32].ljust(32, b"\x00")
        if len(raws) == 1:
            return crypto.derive_uid(self.prf_key, raws[0], cid_rp, salt)
        return crypto.derive_multi_uid(self.prf_key, raws, cid_rp, salt)

    def _pre_uid(self, raws: list[RawUserId], cid_rp: str) -> bytes:
        if len(raws) == 1:
            return crypto.derive_pre_uid(self.prf_key, raws[0], cid_rp)
        return crypto.derive_multi_pre_uid(self.prf_key, raws, cid_rp)

    def _get_or_create_salt(self, pre_uid: bytes) -> bytes:
        key = pre_uid.hex()
        with self._tables_lock:
            existing = self.salt_table.get(key)
            if existing is not None:
                return bytes.fromhex(existing)
            salt = gen_secret()
            self.salt_table[key] = salt.hex()
            self._persist_tables("salt_table")
            return salt

    # -- endpoints: attestation and registration ---------------------------------

    def handle_attestation(self, req: Request) -> Response:
        report = self.platform.attest(self.enclave.eid, self.pk_server)
        body = report.to_dict()
        body["pk_server"] = self.pk_server.hex()
        body["pk_tee"] = self.platform.getpk().hex()
        return Response.json(body)

    def handle_register(self, req: Request) -> Response:
        body = req.json_body or {}
        uri = body.get("redirect_uri", "")
        if not _valid_redirect_uri(uri):
            return Response.oauth_error("invalid_redirect_uri", 400)
        cid = crypto.derive_client_id(gen_secret(), uri)
        secret = to_b64url(gen_secret())
        with self._tables_lock:
            self.rp_registry[cid] = {"redirect_uri": uri, "secret": secret}
            self._persist_tables("rp_registry")
        return Response.json({"client_id": cid, "client_secret": secret})

    # -- endpoint: outer authorization request ------------------------------------

    def handle_auth(self, req: Request) -> Response:
        q = req.query
        reg = self.rp_registry.get(q.get("client_id", ""))
        if reg is None:
            return Response.oauth_error("invalid_client", 401)
        if q.get("redirect_uri", "") != reg["redirect_uri"]:
            return Response.oauth_error("invalid_request", 400)
        if q.get("response_type") != "code":
            return Response.oauth_error("unsupported_response_type", 400)
        state_rp = q.get("state")
        if not state_rp:
            return Response.oauth_error("invalid_request", 400)

        if "idp_list" in q:
            idp_list = sorted({p.strip() for p in q["idp_list"].split(",") if p.strip()})
            if not idp_list:
                return Response.oauth_error("invalid_request", 400)
            unknown = [i for i in idp_list if i not in self.idps]
            if unknown:
                return Response.oauth_error("unknown_idp", 400)
            mode = "multi"
        else:
            if "m" in q:
                return Response.oauth_error("invalid_request", 400)
            if self.default_idp is None:
                return Response.oauth_error("server_error", 500)
            idp_list, mode = [self.default_idp], "single"

        n = len(idp_list)
        threshold = max(1, n - 1)
        if "m" in q:
            try:
                threshold = int(q["m"])
            except ValueError:
                return Response.oauth_error("invalid_threshold", 400)
            if threshold < 1 or threshold > n:
                return Response.oauth_error("invalid_threshold", 400)

        session = LoginSession(
            session_id=secrets.token_hex(16),
            cid_rp=q["client_id"],
            redirect_uri=reg["redirect_uri"],
            state_rp=state_rp,
            mode=mode,
            idp_list=idp_list,
            threshold=threshold,
            pending=list(idp_list),
            created_at=time.time(),
        )
        with self._sessions_lock:
            self._prune_locked()
            self._sessions[session.session_id] = session
        return self._redirect_to_next_idp(session)

    def _redirect_to_next_idp(self, session: LoginSession) -> Response:
        idp_id = session.pending[0]
        entry = self.idps[idp_id]
        state_mixer = to_b64url(gen_secret())
        with self._sessions_lock:
            self._states[state_mixer] = (session.session_id, idp_id)
        params = {
            "response_type": "code",
            "client_id": entry["client_id"],
            "redirect_uri": self.callback_uri,
            "state": state_mixer,
        }
        if self.debug_leak_cid_rp:
            params["cid_rp"] = session.cid_rp  # fault injection, see module docstring
        return Response.redirect(f"{entry['auth_url']}?{urllib.parse.urlencode(params)}")

    @property
    def callback_uri(self) -> str:
        return f"{self.public_url or self.base_url}/callback"

    # -- endpoint: inner-flow callback ----------------------------------------------

    def handle_idp_callback(self, req: Request) -> Response:
        state = req.query.get("state", "")
        with self._sessions_lock:
            entry = self._states.pop(state, None)  # single use
            session = self._sessions.get(entry[0]) if entry else None
        if entry is None or session is None:
            return Response.oauth_error("invalid_state", 400)
        if session.created_at + self.session_lifetime < time.time():
            return Response.oauth_error("invalid_state", 400)
        _, idp_id = entry

        if "error" in req.query:
            # the user denied at the IdP (or the IdP refused); fail the outer flow
            session.phase = PHASE_FAILED
            return Response.redirect(_with_query(session.redirect_uri, {
                "error": req.query["error"], "state": session.state_rp,
            }))
        code = req.query.get("code")
        if not code:
            return Response.oauth_error("invalid_request", 400)

        idp = self.idps[idp_id]
        # inner token exchange; the access token stays local to this frame and
        # is dropped as soon as the raw id has been fetched
        token_resp = self.fetch("POST", idp["token_url"], data={
            "grant_type": "authorization_code",
            "code": code,
            "redirect_uri": self.callback_uri,
            "client_id": idp["client_id"],
            "client_secret": idp["client_secret"],
        })
        try:
            if token_resp.status_code != 200:
                raise ValueError("token endpoint refused")
            token_mixer = token_resp.json().get("access_token", "")
            res_resp = self.fetch("GET", idp["res_url"],
                                  headers={"Authorization": f"Bearer {token_mixer}"})
            del token_mixer
            if res_resp.status_code != 200:
                raise ValueError("resource endpoint refused")
            identity = res_resp.json()
        except ValueError:
            session.phase = PHASE_FAILED
            return Response.oauth_error("upstream_idp_failure", 502)
        uid = identity.get("uid", "")
        if not uid:
            session.phase = PHASE_FAILED
            return Response.oauth_error("upstream_idp_failure", 502)

        with self._sessions_lock:
            session.raws.append(RawUserId(idp_id=idp_id, uid=str(uid)))
            for key, value in (identity.get("attributes") or {}).items():
                session.attributes.setdefault(str(key), str(value))
            session.pending.remove(idp_id)
            more = bool(session.pending)
            if more:
                session.phase = PHASE_AWAIT_NEXT
        if more:
            return self._redirect_to_next_idp(session)
        return self._finalize(session)

    def _finalize(self, session: LoginSession) -> Response:
        if session.mode == "single":
            session.pre_uid = self._pre_uid(session.raws, session.cid_rp)
            salt = self._get_or_create_salt(session.pre_uid)
            session.uid_blinded = self._blind(session.raws, session.cid_rp, salt)
        else:
            outcome = self._finalize_multi(session)
            if outcome is not None:
                session.phase = PHASE_FAILED
                return outcome

        session.phase = PHASE_FINALIZED
        code_rp = to_b64url(gen_secret())
        with self._sessions_lock:
            self._codes[code_rp] = {
                "session_id": session.session_id,
                "cid_rp": session.cid_rp,
                "redirect_uri": session.redirect_uri,
                "expires": time.time() + self.code_lifetime,
            }
        resp = Response.redirect(_with_query(session.redirect_uri, {
            "code": code_rp, "state": session.state_rp,
        }))
        # cookie lets the user come back to /policy while the session lives
        return resp.set_cookie(self._cookie_name(), session.session_id)

    def _finalize_multi(self, session: LoginSession) -> Response | None:
        """Phase detection and enrollment. Returns an error response or None."""
        tags = {crypto.derive_tag(self.prf_key, raw).hex() for raw in session.raws}
        with self._tables_lock:
            matches = []
            overlap = False
            for record in self.tag_table:
                if record.cid_rp != session.cid_rp:
                    continue
                hits = len(tags & record.tag_set)
                if hits >= record.m:
                    matches.append(record)
                elif hits:
                    overlap = True
            if len(matches) > 1:
                return Response.oauth_error("ambiguous_match", 409)
            if matches:
                record = matches[0]
                session.pre_uid = bytes.fromhex(record.pre_uid)
                session.uid_blinded = bytes.fromhex(record.uid_blinded)
                return None
            if overlap:
                return Response.oauth_error("threshold_not_met", 403)
            # phase I: first sign-on of this IdP set at this RP
            session.pre_uid = self._pre_uid(session.raws, session.cid_rp)
            salt = self._get_or_create_salt(session.pre_uid)
            session.uid_blinded = self._blind(session.raws, session.cid_rp, salt)
            self.tag_table.append(TagRecord(
                tag_set=tags,
                n=len(session.idp_list),
                m=session.threshold,
                cid_rp=session.cid_rp,
                uid_blinded=session.uid_blinded.hex(),
                pre_uid=session.pre_uid.hex(),
            ))
            self._persist_tables("tag_table")
            return None

    # -- endpoints: outer token and resource ----------------------------------------

    def handle_token(self, req: Request) -> Response:
        form = req.form
        if form.get("grant_type") != "authorization_code":
            return Response.oauth_error("unsupported_grant_type", 400)
        reg = self.rp_registry.get(form.get("client_id", ""))
        if reg is None or not constant_time_eq(form.get("client_secret", ""), reg["secret"]):
            return Response.oauth_error("invalid_client", 401)
        with self._sessions_lock:
            grant = self._codes.pop(form.get("code", ""), None)  # single use
            session = self._sessions.get(grant["session_id"]) if grant else None
        if (
            grant is None
            or grant["expires"] < time.time()
            or grant["cid_rp"] != form.get("client_id")
            or form.get("redirect_uri", "") != grant["redirect_uri"]
            or session is None
            or session.phase != PHASE_FINALIZED
            or session.uid_blinded is None
        ):
            return Response.oauth_error("invalid_grant", 400)
        token = to_b64url(gen_secret())
        with self._sessions_lock:
            self._tokens[token] = {
                "sub": session.uid_blinded.hex(),
                "pre_uid": session.pre_uid.hex(),
                "attributes": dict(session.attributes),
                "expires": time.time() + self.token_lifetime,
            }
        return Response.json({
            "access_token": token,
            "token_type": "Bearer",
            "expires_in": self.token_lifetime,
        })

    def handle_resource(self, req: Request) -> Response:
        token = req.bearer_token()
        with self._sessions_lock:
            entry = self._tokens.get(token) if token else None
            if entry and entry["expires"] < time.time():
                del self._tokens[token]
                entry = None
        if entry is None:
            return Response.oauth_error("invalid_token", 401)
        with self._tables_lock:
            allowed = self.policies.get(entry["pre_uid"], [])
        attributes = {k: v for k, v in entry["attributes"].items() if k in allowed}
        return Response.json({"sub": entry["sub"], "attributes": attributes})

    # -- endpoint: selective disclosure --------------------------------------------

    def _policy_session(self, req: Request) -> LoginSession | None:
        sid = req.cookies.get(self._cookie_name()) or req.params.get("session")
        with self._sessions_lock:
            session = self._sessions.get(sid) if sid else None
        if session is None or session.phase != PHASE_FINALIZED or session.pre_uid is None:
            return None
        if session.created_at + self.session_lifetime < time.time():
            return None
        return session

    def handle_policy_get(self, req: Request) -> Response:
        session = self._policy_session(req)
        if session is None:
            return Response.oauth_error("unauthorized", 401)
        with self._tables_lock:
            allowed = self.policies.get(session.pre_uid.hex(), [])
        return Response.json({
            "allowed_attributes": allowed,
            "available": sorted(self.attribute_names),
        })

    def handle_policy_set(self, req: Request) -> Response:
        session = self._policy_session(req)
        if session is None:
            return Response.oauth_error("unauthorized", 401)
        raw = req.params.get("attributes", "")
        names = sorted({a.strip() for a in raw.split(",") if a.strip()})
        unknown = [a for a in names if a not in self.attribute_names]
        if unknown:
            return Response.oauth_error("invalid_attribute", 400)
        with self._tables_lock:
            self.policies[session.pre_uid.hex()] = names
            self._persist_tables("policies")
        return Response.json({"allowed_attributes": names})

    # -- misc -----------------------------------------------------------------------

    def _cookie_name(self) -> str:
        return f"mixersid{self.port}"

    def health(self) -> dict:
        return {
            "status": "ok",
            "kind": self.kind,
            "measurement": self.enclave.measurement.hex(),
            "idps": sorted(self.idps),
            "seal_mode": self.seal_mode,
        }

    def handle_debug_sessions(self, req: Request) -> Response:
        """Serialize the whole in-memory session store (debug runs only)."""
        with self._sessions_lock:
            dump = {
                "sessions": [
                    {
                        "session_id": s.session_id,
                        "cid_rp": s.cid_rp,
                        "state_rp": s.state_rp,
                        "mode": s.mode,
                        "idp_list": s.idp_list,
                        "phase": s.phase,
                        "raws": [[r.idp_id, r.uid] for r in s.raws],
                        "attributes": s.attributes,
                        "uid_blinded": s.uid_blinded.hex() if s.uid_blinded else None,
                    }
                    for s in self._sessions.values()
                ],
                "codes": list(self._codes.values()),
                "tokens": list(self._tokens.values()),
            }
        return Response.json(dump)

    def _prune_locked(self) -> None:
        now = time.time()
        if now - self._last_prune < 1.0:  # full sweeps are O(sessions)
            return
        self._last_prune = now
        dead = [sid for sid, s in self._sessions.items()
                if s.created_at + self.session_lifetime < now]
        for sid in dead:
            del self._sessions[sid]
        for code in [c for c, g in self._codes.items() if g["expires"] < now]:
            del self._codes[code]
        for token in [t for t, e in self._tokens.items() if e["expires"] < now]:
            del self._tokens[token]


def _valid_redirect_uri(uri: str) -> bool:
    parsed = urllib.parse.urlsplit(uri)
    if parsed.scheme == "https":
        return bool(parsed.netloc)
    if parsed.scheme == "http":
        return (parsed.hostname or "") in ("127.0.0.1", "localhost", "::1")
    return False


def _with_query(url: str, extra: dict[str, str]) -> str:
    parsed = urllib.parse.urlsplit(url)
    query = urllib.parse.parse_qsl(parsed.query, keep_blank_values=True)
    query.extend(extra.items())
    return urllib.parse.urlunsplit(parsed._replace(query=urllib.parse.urlencode(query)))


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Run the mixer service")
    parser.add_argument("--config", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    try:
        service = MixerService(Config.load(args.config))
    except SealTamperError as exc:
        log.error("refusing to start: sealed state failed authentication (%s)", exc)
        sys.exit(1)
    except ConfigError as exc:
        log.error("bad config: %s", exc)
        sys.exit(1)
    service.start()
    log.info("mixer listening on %s (measurement %s)",
             service.base_url, service.enclave.measurement.hex())
    threading.Event().wait()


if __name__ == "__main__":
    main()
