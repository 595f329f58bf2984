"""Mock OAuth 2.0 identity provider (authorization code grant).

Standards-faithful on the wire -- RFC 6749 parameter names, single-use
codes, bearer tokens -- so the mixer talks to it exactly the way it would
talk to a commercial provider. The mock deliberately shares no client
code with the mixer's IdP-facing side; their only common ground is the
protocol itself.

Users and static clients come from a YAML fixtures file; dynamically
registered clients persist to clients.json in the state directory.
"""

from __future__ import annotations

import argparse
import hashlib
import html
import json
import logging
import os
import secrets
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .config import Config
from .crypto import constant_time_eq, gen_secret, to_b64url
from .webbase import HttpService, Request, Response

log = logging.getLogger("miso.idp")

CODE_LIFETIME_S = 600
TOKEN_LIFETIME_S = 3600

PBKDF2_ITERATIONS = 20_000  # dev-stack default; override via fixtures


def hash_password(password: str, iterations: int = PBKDF2_ITERATIONS) -> str:
    salt = secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, iterations)
    return f"pbkdf2_sha256${iterations}${salt.hex()}${digest.hex()}"


def check_password(password: str, encoded: str) -> bool:
    try:
        scheme, iters, salt_hex, digest_hex = encoded.split("$")
        if scheme != "pbkdf2_sha256":
            return False
        digest = hashlib.pbkdf2_hmac("sha256", password.encode(), bytes.fromhex(salt_hex), int(iters))
        return constant_time_eq(digest.hex(), digest_hex)
    except (ValueError, TypeError):
        return False


@dataclass
class IdpUser:
    uid: str
    username: str
    password_hash: str
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class IdpClient:
    client_id: str
    client_secret: str
    redirect_uri: str
    client_name: str = ""


def load_fixtures(path: str | Path) -> tuple[dict[str, IdpUser], dict[str, IdpClient]]:
    """Parse the fixtures YAML into user and client maps.

    Users may carry either `password_hash` or a plaintext `password`
    (hashed at load; meant for hand-written test fixtures only).
    """
    data = yaml.safe_load(Path(path).read_text()) or {}
    users: dict[str, IdpUser] = {}
    for entry in data.get("users", []):
        pw_hash = entry.get("password_hash")
        if not pw_hash:
            pw_hash = hash_password(entry["password"])
        user = IdpUser(
            uid=str(entry["uid"]),
            username=str(entry["username"]),
            password_hash=pw_hash,
            attributes={str(k): str(v) for k, v in (entry.get("attributes") or {}).items()},
        )
        users[user.username] = user
    clients: dict[str, IdpClient] = {}
    for entry in data.get("clients", []):
        client = IdpClient(
            client_id=str(entry["client_id"]),
            client_secret=str(entry["client_secret"]),
            redirect_uri=str(entry["redirect_uri"]),
            client_name=str(entry.get("client_name", "")),
        )
        clients[client.client_id] = client
    return users, clients


_LOGIN_PAGE = """<!doctype html>
<html><head><title>{idp_id} sign in</title><link rel="stylesheet" href="/ui/style.css"></head>
<body>
<main class="card">
<h1>Sign in with {idp_id}</h1>
<p class="consent">If you continue, <strong>{requester}</strong> will be able to
confirm your identity on {idp_id}.</p>
{notice}
<form id="login" method="post" action="/auth_IdP">
  <input type="hidden" name="response_type" value="{response_type}">
  <input type="hidden" name="client_id" value="{client_id}">
  <input type="hidden" name="redirect_uri" value="{redirect_uri}">
  <input type="hidden" name="state" value="{state}">
  <label>Username <input type="text" name="username" autocomplete="username"></label>
  <label>Password <input type="password" name="password" autocomplete="current-password"></label>
  <div class="actions">
    <button type="submit" name="consent" value="grant">Sign in and allow</button>
    <button type="submit" name="consent" value="deny" formnovalidate>Deny</button>
  </div>
</form>
</main>
<script type="module" src="/ui/consent.js"></script>
</body></html>
"""


class IdpService(HttpService):
    kind = "idp"

    def __init__(self, config: Config):
        super().__init__(config)
        self.idp_id = config.require("idp_id")
        self.name = self.idp_id
        self.state_dir = Path(config.require("state_dir"))
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.auto_grant = config.get_bool("auto_grant", False)
        self.code_lifetime = config.get_int("code_lifetime_s", CODE_LIFETIME_S)
        self.token_lifetime = config.get_int("token_lifetime_s", TOKEN_LIFETIME_S)

        self._lock = threading.Lock()
        self._codes: dict[str, dict] = {}
        self._tokens: dict[str, dict] = {}

        fixtures = config.get("fixtures")
        self.users, self.clients = ({}, {})
        if fixtures:
            self.users, self.clients = load_fixtures(fixtures)
        self._registered_ids: set[str] = set()
        self._load_registered_clients()

        self.route("GET", "/auth_IdP", self.handle_auth_page)
        self.route("POST", "/auth_IdP", self.handle_auth_submit)
        self.route("POST", "/token_IdP", self.handle_token)
        self.route("GET", "/res_IdP", self.handle_resource)
        self.route("POST", "/register", self.handle_register)

    def health(self) -> dict:
        return {"status": "ok", "kind": self.kind, "name": self.idp_id,
                "users": len(self.users), "clients": len(self.clients)}

    # -- client registry ----------------------------------------------------

    def _clients_file(self) -> Path:
        return self.state_dir / "clients.json"

    def _load_registered_clients(self) -> None:
        path = self._clients_file()
        if path.exists():
            for entry in json.loads(path.read_text()).values():
                client = IdpClient(**entry)
                self.clients[client.client_id] = client
                self._registered_ids.add(client.client_id)

    def _persist_registered_clients(self) -> None:
        registered = {
            cid: vars(self.clients[cid]) for cid in sorted(self._registered_ids)
        }
        tmp = self._clients_file().with_suffix(".json.tmp")
        tmp.write_text(json.dumps(registered, indent=2))
        os.replace(tmp, self._clients_file())

    def handle_register(self, req: Request) -> Response:
        body = req.json_body or {}
        uri = body.get("redirect_uri", "")
        if not _valid_redirect_uri(uri):
            return Response.oauth_error("invalid_redirect_uri", 400)
        client = IdpClient(
            client_id=secrets.token_hex(16),
            client_secret=to_b64url(gen_secret()),
            redirect_uri=uri,
            client_name=str(body.get("client_name", "")),
        )
        with self._lock:
            self.clients[client.client_id] = client
            self._registered_ids.add(client.client_id)
            self._persist_registered_clients()
        return Response.json({"client_id": client.client_id, "client_secret": client.client_secret})

    # -- authorization endpoint ----------------------------------------------

    def _validate_auth_params(self, params: dict[str, str]) -> tuple[IdpClient | None, Response | None]:
        client = self.clients.get(params.get("client_id", ""))
        if client is None:
            return None, Response.oauth_error("invalid_client", 401)
        if params.get("redirect_uri", "") != client.redirect_uri:
            return None, Response.oauth_error("invalid_request", 400)
        if params.get("response_type") != "code":
            return None, Response.oauth_error("unsupported_response_type", 400)
        if "state" not in params:
            return None, Response.oauth_error("invalid_request", 400)
        return client, None

    def _login_page(self, client: IdpClient, params: dict[str, str], notice: str = "") -> Response:
        requester = client.client_name or urllib.parse.urlsplit(client.redirect_uri).netloc
        page = _LOGIN_PAGE.format(
            idp_id=html.escape(self.idp_id),
            requester=html.escape(requester),
            notice=f'<p class="error">{html.escape(notice)}</p>' if notice else "",
            response_type=html.escape(params.get("response_type", "code")),
            client_id=html.escape(params.get("client_id", "")),
            redirect_uri=html.escape(params.get("redirect_uri", ""), quote=True),
            state=html.escape(params.get("state", ""), quote=True),
        )
        return Response.html(page, status=200 if not notice else 401)

    def handle_auth_page(self, req: Request) -> Response:
        client, err = self._validate_auth_params(req.query)
        if err:
            return err
        return self._login_page(client, req.query)

    def handle_auth_submit(self, req: Request) -> Response:
        client, err = self._validate_auth_params(req.form)
        if err:
            return err
        params = req.form
        state = params["state"]
        consent = params.get("consent", "grant" if self.auto_grant else "")
        if consent == "deny":
            # user declined: terminate the flow, no code
            return Response.redirect(_with_query(client.redirect_uri, {
                "error": "access_denied", "state": state,
            }))
        user = self.users.get(params.get("username", ""))
        if user is None or not check_password(params.get("password", ""), user.password_hash):
            return self._login_page(client, params, notice="Wrong username or password.")
        if consent != "grant":
            return self._login_page(client, params, notice="Please allow or deny the request.")
        code = to_b64url(gen_secret())
        with self._lock:
            self._codes[code] = {
                "client_id": client.client_id,
                "redirect_uri": client.redirect_uri,
                "uid": user.uid,
                "username": user.username,
                "expires": time.time() + self.code_lifetime,
            }
        return Response.redirect(_with_query(client.redirect_uri, {"code": code, "state": state}))

    # -- token and resource endpoints -----------------------------------------

    def handle_token(self, req: Request) -> Response:
        form = req.form
        if form.get("grant_type") != "authorization_code":
            return Response.oauth_error("unsupported_grant_type", 400)
        client = self.clients.get(form.get("client_id", ""))
        if client is None or not constant_time_eq(form.get("client_secret", ""), client.client_secret):
            return Response.oauth_error("invalid_client", 401)
        with self._lock:
            grant = self._codes.pop(form.get("code", ""), None)  # single use
        if (
            grant is None
            or grant["expires"] < time.time()
            or grant["client_id"] != client.client_id
            or form.get("redirect_uri", "") != grant["redirect_uri"]
        ):
            return Response.oauth_error("invalid_grant", 400)
        token = to_b64url(gen_secret())
        with self._lock:
            self._tokens[token] = {
                "uid": grant["uid"],
                "username": grant["username"],
                "expires": time.time() + self.token_lifetime,
            }
        return Response.json({
            "access_token": token,
            "token_type": "Bearer",
            "expires_in": self.token_lifetime,
        })

    def handle_resource(self, req: Request) -> Response:
        token = req.bearer_token()
        with self._lock:
            entry = self._tokens.get(token) if token else None
            if entry and entry["expires"] < time.time():
                del self._tokens[token]
                entry = None
        if entry is None:
            return Response.oauth_error("invalid_token", 401)
        user = self.users[entry["username"]]
        return Response.json({"uid": user.uid, "attributes": dict(user.attributes)})


def _valid_redirect_uri(uri: str) -> bool:
    parsed = urllib.parse.urlsplit(uri)
    if parsed.scheme == "https":
        return bool(parsed.netloc)
    if parsed.scheme == "http":
        host = parsed.hostname or ""
        return host in ("127.0.0.1", "localhost", "::1")
    return False


def _with_query(url: str, extra: dict[str, str]) -> str:
    parsed = urllib.parse.urlsplit(url)
    query = urllib.parse.parse_qsl(parsed.query, keep_blank_values=True)
    query.extend(extra.items())
    return urllib.parse.urlunsplit(parsed._replace(query=urllib.parse.urlencode(query)))


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Run a mock identity provider")
    parser.add_argument("--config", required=True)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    service = IdpService(Config.load(args.config))
    service.start()
    log.info("idp %s listening on %s", service.idp_id, service.base_url)
    threading.Event().wait()


if __name__ == "__main__":
    main()
