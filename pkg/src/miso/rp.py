"""Demo relying party.

Plain OAuth 2.0 client with one extra ritual: before registering at the
mixer it fetches the attestation report, verifies the signature against
the platform key and the expected program measurement, and pins the
mixer's server key (trust on first use). A mixer that later presents a
different key or measurement is refused until an operator re-pins.

With `baseline_mode = true` the same code points straight at an identity
provider and runs a standard SSO login; nothing else changes. That mode
exists for latency comparisons and as a living check that the mixer's
RP-facing surface is an ordinary provider.
"""

from __future__ import annotations

import argparse
import html
import json
import logging
import os
import secrets
import sys
import threading
import time
import urllib.parse
from pathlib import Path

from .config import Config, ConfigError
from .crypto import gen_secret, to_b64url
from .enclave import AttestationReport, verify_attestation
from .tlscert import cert_public_key_raw
from .webbase import HttpService, Request, Response

log = logging.getLogger("miso.rp")

SESSION_LIFETIME_S = 3600


class BootstrapError(Exception):
    pass


class RepinRequired(BootstrapError):
    """The mixer's key or measurement changed since it was pinned."""


_LOGIN_PAGE = """<!doctype html>
<html><head><title>{rp_name}</title><link rel="stylesheet" href="/ui/style.css"></head>
<body>
<main class="card">
<h1>{rp_name}</h1>
<p>Sign in without telling anyone where you are signing in.</p>
<div id="login-root"
     data-idps="{idp_csv}"
     data-baseline="{baseline}"></div>
<noscript>
<form method="get" action="/login/start">
  <fieldset><legend>Identity providers</legend>
  {idp_checkboxes}
  </fieldset>
  <label>Threshold m <input type="number" name="m" min="1" value=""></label>
  <button type="submit">Sign in</button>
</form>
</noscript>
</main>
<script type="module" src="/ui/login.js"></script>
</body></html>
"""

_RESULT_PAGE = """<!doctype html>
<html><head><title>{rp_name}</title><link rel="stylesheet" href="/ui/style.css"></head>
<body><main class="card">
<h1>{heading}</h1>
{body}
<p><a href="/login">Back to sign-in</a></p>
</main></body></html>
"""


class RpService(HttpService):
    kind = "rp"

    def __init__(self, config: Config):
        super().__init__(config)
        self.rp_name = config.get("rp_name", "Demo RP")
        self.state_dir = Path(config.require("state_dir"))
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.baseline_mode = config.get_bool("baseline_mode", False)
        self.provider_base = config.require("provider_url").rstrip("/")
        suffix = "IdP" if self.baseline_mode else "mixer"
        self.auth_url = config.get("auth_url") or f"{self.provider_base}/auth_{suffix}"
        self.token_url = config.get("token_url") or f"{self.provider_base}/token_{suffix}"
        self.res_url = config.get("res_url") or f"{self.provider_base}/res_{suffix}"
        self.register_url = config.get("register_url") or f"{self.provider_base}/register"
        self.public_url = config.get("public_url")
        self.idp_choices = [
            i.strip() for i in (config.get("idp_choices") or "").split(",") if i.strip()
        ]

        self._lock = threading.Lock()
        self._sessions: dict[str, dict] = {}
        self.client_id = ""
        self.client_secret = ""
        self.tls_ca = config.get("tls_ca") or None
        self._accounts: dict[str, dict] = {}
        if self._accounts_file().exists():
            self._accounts = json.loads(self._accounts_file().read_text())
        self._accounts_dirty = False
        self._accounts_flushed = 0.0

        self.route("GET", "/login", self.handle_login_page)
        self.route("GET", "/login/start", self.handle_login_start)
        self.route("GET", "/cb", self.handle_callback)
        self.route("GET", "/me", self.handle_me)
        self.route("GET", "/account", self.handle_account_page)
        self.route("GET", "/logout", self.handle_logout)

    # -- bootstrap: attestation, pinning, registration ---------------------------

    def bootstrap(self) -> None:
        """Verify-and-pin, then register. Must run after start() (needs our URL)."""
        if not self.baseline_mode:
            self._verify_and_pin()
        self._ensure_registration()

    def _pinned_file(self) -> Path:
        return self.state_dir / "pinned.json"

    def _verify_and_pin(self) -> None:
        resp = self.http.get(f"{self.provider_base}/attestation", timeout=10,
                             verify=self.tls_ca or True)
        if resp.status_code != 200:
            raise BootstrapError(f"attestation endpoint returned {resp.status_code}")
        body = resp.json()
        report = AttestationReport.from_dict(body)
        expected = self.config.get("expected_measurement")
        if not expected:
            raise ConfigError("expected_measurement is required unless baseline_mode")
        pk_tee_hex = self.config.get("tee_pubkey") or body.get("pk_tee", "")
        if not verify_attestation(bytes.fromhex(pk_tee_hex), report, bytes.fromhex(expected)):
            raise BootstrapError("mixer attestation failed verification; refusing to register")
        if self.tls_ca:
            # channel binding: the TLS key we trust must be the attested one
            cert_key = cert_public_key_raw(Path(self.tls_ca).read_bytes())
            if cert_key.hex() != body["pk_server"]:
                raise BootstrapError("mixer TLS certificate key differs from attested key")
        pinned_path = self._pinned_file()
        record = {
            "pk_server": body["pk_server"],
            "measurement": body["measurement"],
            "pk_tee": pk_tee_hex,
            "pinned_at": time.time(),
        }
        if pinned_path.exists():
            prior = json.loads(pinned_path.read_text())
            if (prior["pk_server"], prior["measurement"]) != (record["pk_server"], record["measurement"]):
                raise RepinRequired(
                    "mixer key or measurement changed since first use; "
                    "remove pinned.json to re-pin deliberately"
                )
        else:
            tmp = pinned_path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(record, indent=2))
            os.replace(tmp, pinned_path)

    @property
    def redirect_uri(self) -> str:
        return f"{self.public_url or self.base_url}/cb"

    def _credentials_file(self) -> Path:
        return self.state_dir / "credentials.json"

    def _ensure_registration(self) -> None:
        path = self._credentials_file()
        if path.exists():
            creds = json.loads(path.read_text())
            if creds.get("redirect_uri") == self.redirect_uri:
                self.client_id = creds["client_id"]
                self.client_secret = creds["client_secret"]
                return
        resp = self.http.post(self.register_url, json={
            "redirect_uri": self.redirect_uri,
            "client_name": self.rp_name,
        }, timeout=10, verify=self.tls_ca or True)
        if resp.status_code != 200:
            raise BootstrapError(f"registration failed: {resp.status_code} {resp.text}")
        body = resp.json()
        self.client_id = body["client_id"]
        self.client_secret = body["client_secret"]
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({
            "client_id": self.client_id,
            "client_secret": self.client_secret,
            "redirect_uri": self.redirect_uri,
        }, indent=2))
        os.replace(tmp, path)

    # -- accounts -----------------------------------------------------------------

    def _accounts_file(self) -> Path:
        return self.state_dir / "accounts.json"

    def _find_or_create_account(self, idp_set: str, sub: str) -> dict:
        with self._lock:
            key = f"{idp_set}|{sub}"
            now = time.time()
            account = self._accounts.get(key)
            if account is None:
                account = {
                    "account_id": f"acct-{len(self._accounts) + 1:06d}",
                    "idp_set": idp_set,
                    "sub": sub,
                    "first_login": now,
                    "last_login": now,
                }
                self._accounts[key] = account
            else:
                account["last_login"] = now
            self._accounts_dirty = True
            # write-behind: serializing the whole table per login does not scale
            if now - self._accounts_flushed >= 1.0:
                self._flush_accounts_locked()
            return dict(account)

    def _flush_accounts_locked(self) -> None:
        tmp = self._accounts_file().with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self._accounts, indent=2))
        os.replace(tmp, self._accounts_file())
        self._accounts_dirty = False
        self._accounts_flushed = time.time()

    def stop(self) -> None:
        with self._lock:
            if self._accounts_dirty:
                self._flush_accounts_locked()
        super().stop()

    # -- endpoints ------------------------------------------------------------------

    def _cookie_name(self) -> str:
        return f"rpsid{self.port}"

    def handle_login_page(self, req: Request) -> Response:
        boxes = "\n".join(
            f'<label><input type="checkbox" name="idp" value="{html.escape(i)}"> {html.escape(i)}</label>'
            for i in self.idp_choices
        )
        return Response.html(_LOGIN_PAGE.format(
            rp_name=html.escape(self.rp_name),
            idp_csv=html.escape(",".join(self.idp_choices), quote=True),
            baseline="1" if self.baseline_mode else "0",
            idp_checkboxes=boxes,
        ))

    def handle_login_start(self, req: Request) -> Response:
        state = to_b64url(gen_secret())
        idp_list = req.query.get("idp_list", "")
        if not idp_list and "idp" in req.query:
            idp_list = req.query["idp"]
        m = req.query.get("m", "")
        sid = secrets.token_hex(16)
        with self._lock:
            self._prune_locked()
            self._sessions[sid] = {
                "state": state,
                "idp_set": idp_list or "default",
                "created_at": time.time(),
            }
        params = {
            "response_type": "code",
            "client_id": self.client_id,
            "redirect_uri": self.redirect_uri,
            "state": state,
        }
        if idp_list:
            params["idp_list"] = idp_list
        if m:
            params["m"] = m
        resp = Response.redirect(f"{self.auth_url}?{urllib.parse.urlencode(params)}")
        return resp.set_cookie(self._cookie_name(), sid)

    def handle_callback(self, req: Request) -> Response:
        sid = req.cookies.get(self._cookie_name(), "")
        with self._lock:
            session = self._sessions.get(sid)
            expected_state = session.pop("state", None) if session else None
        if session is None or expected_state is None:
            return Response.html(self._page("Login failed", "<p>No login in progress.</p>"), status=403)
        if req.query.get("state", "") != expected_state:
            # CSRF defense: the callback must echo the state we sent
            return Response.html(self._page("Login failed", "<p>State mismatch.</p>"), status=403)
        if "error" in req.query:
            code = html.escape(req.query["error"])
            return Response.html(self._page(
                "Login cancelled", f"<p>The provider reported: <code>{code}</code>.</p>"))
        code = req.query.get("code", "")
        token_resp = self.fetch("POST", self.token_url, data={
            "grant_type": "authorization_code",
            "code": code,
            "redirect_uri": self.redirect_uri,
            "client_id": self.client_id,
            "client_secret": self.client_secret,
        })
        if token_resp.status_code != 200:
            return Response.html(self._page("Login failed", "<p>Token exchange failed.</p>"), status=502)
        try:
            token = token_resp.json()["access_token"]
        except (ValueError, KeyError):
            return Response.html(self._page("Login failed", "<p>Bad token response.</p>"), status=502)
        res_resp = self.fetch("GET", self.res_url, headers={"Authorization": f"Bearer {token}"})
        if res_resp.status_code != 200:
            return Response.html(self._page("Login failed", "<p>Identity fetch failed.</p>"), status=502)
        identity = res_resp.json()
        sub = identity.get("sub") or identity.get("uid", "")
        if not sub:
            return Response.html(self._page("Login failed", "<p>No identifier returned.</p>"), status=502)
        account = self._find_or_create_account(session["idp_set"], sub)
        with self._lock:
            session.update({
                "logged_in": True,
                "sub": sub,
                "account_id": account["account_id"],
                "idp_set": session["idp_set"],
                "attributes": identity.get("attributes") or {},
            })
        return Response.redirect("/account")

    def _session_for(self, req: Request) -> dict | None:
        sid = req.cookies.get(self._cookie_name(), "")
        with self._lock:
            session = self._sessions.get(sid)
        if session and session.get("logged_in"):
            return session
        return None

    def handle_me(self, req: Request) -> Response:
        session = self._session_for(req)
        if session is None:
            return Response.json({"logged_in": False}, status=401)
        return Response.json({
            "logged_in": True,
            "sub": session["sub"],
            "account_id": session["account_id"],
            "idp_set": session["idp_set"],
            "attributes": session["attributes"],
        })

    def handle_account_page(self, req: Request) -> Response:
        session = self._session_for(req)
        if session is None:
            return Response.redirect("/login")
        attrs = "".join(
            f"<li>{html.escape(k)}: {html.escape(v)}</li>"
            for k, v in sorted(session["attributes"].items())
        ) or "<li>(none disclosed)</li>"
        body = (
            f'<p>You are signed in as account <strong>{html.escape(session["account_id"])}</strong>.</p>'
            f'<p>Provider set: <code>{html.escape(session["idp_set"])}</code></p>'
            f'<p>Blinded identifier: <code id="sub">{html.escape(session["sub"])}</code></p>'
            f"<ul>{attrs}</ul>"
        )
        return Response.html(self._page("Signed in", body))

    def handle_logout(self, req: Request) -> Response:
        sid = req.cookies.get(self._cookie_name(), "")
        with self._lock:
            self._sessions.pop(sid, None)
        return Response.redirect("/login")

    def _page(self, heading: str, body: str) -> str:
        return _RESULT_PAGE.format(rp_name=html.escape(self.rp_name),
                                   heading=html.escape(heading), body=body)

    def _prune_locked(self) -> None:
        now = time.time()
        for sid in [s for s, v in self._sessions.items()
                    if v.get("created_at", 0) + SESSION_LIFETIME_S < now]:
            del self._sessions[sid]

    def health(self) -> dict:
        return {
            "status": "ok",
            "kind": self.kind,
            "name": self.rp_name,
            "registered": bool(self.client_id),
            "baseline_mode": self.baseline_mode,
        }


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Run the demo relying party")
    parser.add_argument("--config", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    service = RpService(Config.load(args.config))
    service.start()
    try:
        service.bootstrap()
    except (BootstrapError, ConfigError) as exc:
        log.error("bootstrap failed: %s", exc)
        service.stop()
        sys.exit(1)
    log.info("rp %s listening on %s", service.rp_name, service.base_url)
    threading.Event().wait()


if __name__ == "__main__":
    main()
