"""Shared HTTP plumbing for the mixer, IdP mock, and demo RP.

A thin routing layer over the stdlib threading HTTP server: each service
subclasses HttpService and registers handlers keyed by (method, path).
Threading matters here -- login flows hold many concurrent connections --
so handlers must be thread-safe and the server uses a daemon thread per
connection with HTTP/1.1 keep-alive.

When `debug` is on, every inbound request and outbound client call is
recorded in an in-memory transcript, exposed at /debug/transcript. The
experiment harness reads these taps to check what each party actually
saw on the wire; recording never alters protocol behavior.
"""

from __future__ import annotations

import json
import logging
import socket
import ssl
import threading
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional

import requests
import requests.adapters

from .config import Config
from .webclient import ClientResponse, PooledClient

log = logging.getLogger("miso")


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    form: dict[str, str]
    json_body: Optional[dict]
    headers: dict[str, str]
    cookies: dict[str, str]

    @property
    def params(self) -> dict[str, str]:
        """Query and form parameters merged (form wins on collision)."""
        merged = dict(self.query)
        merged.update(self.form)
        return merged

    def bearer_token(self) -> Optional[str]:
        auth = self.headers.get("authorization", "")
        if auth.lower().startswith("bearer "):
            return auth[7:].strip()
        return None


@dataclass
class Response:
    status: int = 200
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    @classmethod
    def json(cls, payload: dict, status: int = 200, headers: dict | None = None) -> "Response":
        h = {"Content-Type": "application/json"}
        h.update(headers or {})
        return cls(status=status, headers=h, body=json.dumps(payload).encode())

    @classmethod
    def oauth_error(cls, code: str, status: int) -> "Response":
        return cls.json({"error": code}, status=status)

    @classmethod
    def redirect(cls, location: str, headers: dict | None = None) -> "Response":
        h = {"Location": location}
        h.update(headers or {})
        return cls(status=302, headers=h)

    @classmethod
    def html(cls, text: str, status: int = 200, headers: dict | None = None) -> "Response":
        h = {"Content-Type": "text/html; charset=utf-8"}
        h.update(headers or {})
        return cls(status=status, headers=h, body=text.encode())

    def set_cookie(self, name: str, value: str) -> "Response":
        self.headers["Set-Cookie"] = f"{name}={value}; Path=/; HttpOnly"
        return self


Handler = Callable[[Request], Response]


class _TrackingHTTPServer(ThreadingHTTPServer):
    """Threading server that can force-close live keep-alive connections.

    shutdown() only stops the accept loop; established connections keep
    being served by their threads. A stopped service must drop those too,
    or a restarted instance on the same port silently shares traffic with
    its predecessor.
    """

    daemon_threads = True
    request_queue_size = 256

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._conn_lock = threading.Lock()
        self._active: set[socket.socket] = set()

    def process_request(self, request, client_address):
        with self._conn_lock:
            self._active.add(request)
        super().process_request(request, client_address)

    def shutdown_request(self, request):
        with self._conn_lock:
            self._active.discard(request)
        super().shutdown_request(request)

    def close_all_connections(self):
        with self._conn_lock:
            conns = list(self._active)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


def _parse_cookies(header: str) -> dict[str, str]:
    out = {}
    for part in header.split(";"):
        name, _, value = part.strip().partition("=")
        if name:
            out[name] = value
    return out


def _flatten_qs(raw: str) -> dict[str, str]:
    return {k: v[0] for k, v in urllib.parse.parse_qs(raw, keep_blank_values=True).items()}


class Transcript:
    """Ordered record of what one party saw: inbound requests, outbound calls."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[dict] = []
        self._seq = 0

    def record(self, entry: dict) -> None:
        with self._lock:
            entry["seq"] = self._seq
            self._seq += 1
            self._entries.append(entry)

    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


class HttpService:
    """Base for the three protocol services. Subclasses register routes."""

    kind = "service"

    def __init__(self, config: Config):
        self.config = config
        self.name = config.get("name", self.kind)
        self.debug = config.get_bool("debug")
        self.transcript = Transcript()
        self.routes: dict[tuple[str, str], Handler] = {}
        self.ui_dir = config.get("ui_dir")
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        # protocol hot path: warm connections shared across handler threads
        self._client = PooledClient(ca_file=config.get("tls_ca") or None)
        self.http = requests.Session()  # control plane: bootstrap, registration
        adapter = requests.adapters.HTTPAdapter(pool_connections=16, pool_maxsize=64)
        self.http.mount("http://", adapter)
        self.http.mount("https://", adapter)
        self.route("GET", "/healthz", self.handle_healthz)
        if self.debug:
            self.route("GET", "/debug/transcript", self._handle_transcript)

    # -- routing ----------------------------------------------------------

    def route(self, method: str, path: str, handler: Handler) -> None:
        self.routes[(method, path)] = handler

    def handle_healthz(self, req: Request) -> Response:
        return Response.json(self.health())

    def health(self) -> dict:
        return {"status": "ok", "kind": self.kind, "name": self.name}

    def _handle_transcript(self, req: Request) -> Response:
        entries = self.transcript.entries()
        if req.query.get("clear") == "1":
            self.transcript.clear()
        return Response.json({"party": self.name, "entries": entries})

    def _serve_ui(self, path: str) -> Response:
        if not self.ui_dir:
            return Response(status=404, body=b"no ui configured")
        rel = path[len("/ui/"):] or "index.html"
        base = Path(self.ui_dir).resolve()
        target = (base / rel).resolve()
        if not str(target).startswith(str(base)) or not target.is_file():
            return Response(status=404, body=b"not found")
        ctype = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript",
            ".css": "text/css",
            ".json": "application/json",
        }.get(target.suffix, "application/octet-stream")
        return Response(headers={"Content-Type": ctype}, body=target.read_bytes())

    def dispatch(self, req: Request) -> Response:
        if req.path.startswith("/ui/") or req.path == "/ui":
            return self._serve_ui(req.path if req.path != "/ui" else "/ui/")
        handler = self.routes.get((req.method, req.path))
        if handler is None:
            return Response.json({"error": "not_found"}, status=404)
        return handler(req)

    # -- outbound calls (tapped) -------------------------------------------

    def fetch(self, method: str, url: str, data: dict | None = None,
              headers: dict | None = None) -> ClientResponse:
        """Server-to-server call on a pooled keep-alive connection."""
        resp = self._client.request(method, url, data=data, headers=headers)
        if self.debug:
            parsed = urllib.parse.urlsplit(url)
            body = None
            if (resp.header("Content-Type") or "").startswith("application/json"):
                try:
                    body = resp.json()
                except ValueError:
                    body = None
            self.transcript.record({
                "party": self.name,
                "direction": "out",
                "method": method,
                "endpoint": parsed.path,
                "params": dict(data or _flatten_qs(parsed.query)),
                "status": resp.status_code,
                "body": body,
            })
        return resp

    # -- server lifecycle ---------------------------------------------------

    def start(self) -> None:
        host, port = self.config.listen_addr() if self.config.get("listen_addr") else ("127.0.0.1", 0)
        service = self

        class _RequestHandler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_request(self, code="-", size="-"):  # hot path: stay quiet
                pass

            def log_message(self, fmt, *args):
                if log.isEnabledFor(logging.DEBUG):
                    log.debug("%s %s", self.address_string(), fmt % args)

            def _handle(self, method: str) -> None:
                parsed = urllib.parse.urlsplit(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                raw_body = self.rfile.read(length) if length else b""
                ctype = (self.headers.get("Content-Type") or "").split(";")[0].strip()
                form: dict[str, str] = {}
                json_body = None
                if ctype == "application/x-www-form-urlencoded":
                    form = _flatten_qs(raw_body.decode())
                elif ctype == "application/json" and raw_body:
                    try:
                        json_body = json.loads(raw_body)
                    except ValueError:
                        json_body = None
                req = Request(
                    method=method,
                    path=parsed.path,
                    query=_flatten_qs(parsed.query),
                    form=form,
                    json_body=json_body,
                    headers={k.lower(): v for k, v in self.headers.items()},
                    cookies=_parse_cookies(self.headers.get("Cookie", "")),
                )
                try:
                    resp = service.dispatch(req)
                except Exception:
                    log.exception("unhandled error in %s %s", method, parsed.path)
                    resp = Response.json({"error": "server_error"}, status=500)
                if service.debug and not req.path.startswith(("/debug", "/healthz")):
                    params = req.params
                    if json_body:
                        params = dict(params)
                        params.update({k: str(v) for k, v in json_body.items()})
                    service.transcript.record({
                        "party": service.name,
                        "direction": "in",
                        "method": method,
                        "endpoint": req.path,
                        "params": params,
                        "status": resp.status,
                        "location": resp.headers.get("Location"),
                    })
                body = resp.body
                self.send_response(resp.status)
                for key, value in resp.headers.items():
                    self.send_header(key, value)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                if method != "HEAD":
                    self.wfile.write(body)

            def do_GET(self):
                self._handle("GET")

            def do_POST(self):
                self._handle("POST")

            def do_HEAD(self):
                self._handle("HEAD")

        server = _TrackingHTTPServer((host, port), _RequestHandler)
        tls_cert, tls_key = self.config.get("tls_cert"), self.config.get("tls_key")
        self._tls_active = bool(tls_cert and tls_key) and not self.config.get_bool("plaintext", False)
        if self._tls_active:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(tls_cert, tls_key)
            # handshake lazily in the per-connection thread, not the accept loop
            server.socket = ctx.wrap_socket(server.socket, server_side=True,
                                            do_handshake_on_connect=False)
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, name=f"{self.name}-http", daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        assert self._server is not None, "service not started"
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        scheme = "https" if getattr(self, "_tls_active", False) else "http"
        host = self.config.listen_addr()[0] if self.config.get("listen_addr") else "127.0.0.1"
        return f"{scheme}://{host}:{self.port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.close_all_connections()
            self._server.server_close()
            self._server = None

