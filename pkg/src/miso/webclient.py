"""Minimal keep-alive HTTP(S) clients for the protocol hot paths.

A login involves ten-ish tiny loopback requests; general-purpose client
stacks spend more CPU per call than the servers do, which skews latency
measurements at higher arrival rates. These wrappers keep persistent
connections and do nothing else: no redirects, no cookie policy, no
retries beyond replacing a dead pooled connection.

HttpClient is single-threaded (one per user agent). PooledClient shares
warm connections across threads with check-out/check-in, for services
whose handlers call upstream concurrently.

HTTPS is supported when a CA file is given (the mixer's self-signed
certificate doubles as its trust anchor); verification is mandatory for
https URLs.
"""

from __future__ import annotations

import http.client
import json as jsonlib
import queue
import ssl
import threading
import urllib.parse


_ctx_lock = threading.Lock()
_ctx_cache: dict[str, ssl.SSLContext] = {}


def _client_context(ca_file: str) -> ssl.SSLContext:
    """Shared verification context per CA file.

    Parsing the CA on every new agent is measurable at load-test rates;
    contexts are safe to share between connections and threads. Sharing
    does not enable TLS session resumption (the client never passes a
    saved session), so each fresh agent still does a full handshake.
    """
    with _ctx_lock:
        ctx = _ctx_cache.get(ca_file)
        if ctx is None:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
            ctx.load_verify_locations(ca_file)
            _ctx_cache[ca_file] = ctx
        return ctx


class ClientResponse:
    def __init__(self, status: int, headers, body: bytes):
        self.status_code = status
        self._headers = headers  # email.message.Message (case-insensitive)
        self.content = body

    @property
    def text(self) -> str:
        return self.content.decode("utf-8", errors="replace")

    def json(self):
        return jsonlib.loads(self.content)

    def header(self, name: str, default: str | None = None) -> str | None:
        value = self._headers.get(name)
        return value if value is not None else default

    def header_all(self, name: str) -> list[str]:
        return self._headers.get_all(name) or []

    @property
    def headers(self) -> dict[str, str]:
        return dict(self._headers.items())


def _encode_request(data: dict | None, json: dict | None,
                    headers: dict | None) -> tuple[str | None, dict]:
    send_headers = dict(headers or {})
    body = None
    if data is not None:
        body = urllib.parse.urlencode(data)
        send_headers.setdefault("Content-Type", "application/x-www-form-urlencoded")
    elif json is not None:
        body = jsonlib.dumps(json)
        send_headers.setdefault("Content-Type", "application/json")
    return body, send_headers


def _split(url: str) -> tuple[str, str, int, str]:
    parsed = urllib.parse.urlsplit(url)
    if parsed.scheme not in ("http", "https"):
        raise ValueError(f"unsupported scheme in {url!r}")
    port = parsed.port or (443 if parsed.scheme == "https" else 80)
    path = parsed.path + (f"?{parsed.query}" if parsed.query else "")
    return parsed.scheme, parsed.hostname or "127.0.0.1", port, path


class HttpClient:
    """One caller, persistent connection per (scheme, host, port)."""

    def __init__(self, timeout: float = 30.0, ca_file: str | None = None):
        self.timeout = timeout
        self.ca_file = ca_file
        self._ssl_ctx: ssl.SSLContext | None = None
        self._conns: dict[tuple[str, str, int], http.client.HTTPConnection] = {}

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._conns.clear()

    def _context(self) -> ssl.SSLContext:
        if self._ssl_ctx is None:
            if not self.ca_file:
                raise ValueError("https requested but no CA file configured")
            self._ssl_ctx = _client_context(self.ca_file)
        return self._ssl_ctx

    def _connect(self, scheme: str, host: str, port: int) -> http.client.HTTPConnection:
        if scheme == "https":
            return http.client.HTTPSConnection(host, port, timeout=self.timeout,
                                               context=self._context())
        return http.client.HTTPConnection(host, port, timeout=self.timeout)

    def request(self, method: str, url: str, data: dict | None = None,
                headers: dict | None = None, json: dict | None = None) -> ClientResponse:
        scheme, host, port, path = _split(url)
        body, send_headers = _encode_request(data, json, headers)
        key = (scheme, host, port)
        for attempt in (0, 1):
            conn = self._conns.get(key)
            if conn is None:
                conn = self._connect(scheme, host, port)
                self._conns[key] = conn
            try:
                conn.request(method, path, body=body, headers=send_headers)
                resp = conn.getresponse()
                content = resp.read()
                return ClientResponse(resp.status, resp.headers, content)
            except (http.client.HTTPException, ConnectionError, BrokenPipeError, OSError):
                # pooled connection died (idle timeout or peer restart); the
                # request did not complete, so replace the socket and retry once
                conn.close()
                self._conns.pop(key, None)
                if attempt:
                    raise
        raise AssertionError("unreachable")


class PooledClient:
    """Thread-safe connection pool: handlers borrow a warm connection,
    run one request, and return it. Bounded per origin; overflow makes
    throwaway connections rather than queueing the caller."""

    def __init__(self, timeout: float = 30.0, ca_file: str | None = None,
                 per_origin: int = 32):
        self.timeout = timeout
        self.ca_file = ca_file
        self.per_origin = per_origin
        self._lock = threading.Lock()
        self._ssl_ctx: ssl.SSLContext | None = None
        self._idle: dict[tuple[str, str, int], queue.SimpleQueue] = {}

    def _context(self) -> ssl.SSLContext:
        with self._lock:
            if self._ssl_ctx is None:
                if not self.ca_file:
                    raise ValueError("https requested but no CA file configured")
                self._ssl_ctx = _client_context(self.ca_file)
            return self._ssl_ctx

    def _connect(self, scheme: str, host: str, port: int) -> http.client.HTTPConnection:
        if scheme == "https":
            return http.client.HTTPSConnection(host, port, timeout=self.timeout,
                                               context=self._context())
        return http.client.HTTPConnection(host, port, timeout=self.timeout)

    def _checkout(self, key) -> http.client.HTTPConnection | None:
        with self._lock:
            q = self._idle.get(key)
        if q is None:
            return None
        try:
            return q.get_nowait()
        except queue.Empty:
            return None

    def _checkin(self, key, conn) -> None:
        with self._lock:
            q = self._idle.setdefault(key, queue.SimpleQueue())
        if q.qsize() < self.per_origin:
            q.put(conn)
        else:
            conn.close()

    def request(self, method: str, url: str, data: dict | None = None,
                headers: dict | None = None, json: dict | None = None) -> ClientResponse:
        scheme, host, port, path = _split(url)
        body, send_headers = _encode_request(data, json, headers)
        key = (scheme, host, port)
        for attempt in (0, 1):
            # second attempt always uses a fresh socket (first may have
            # drawn a connection that died while idle in the pool)
            conn = self._checkout(key) if attempt == 0 else None
            if conn is None:
                conn = self._connect(scheme, host, port)
            try:
                conn.request(method, path, body=body, headers=send_headers)
                resp = conn.getresponse()
                content = resp.read()
                self._checkin(key, conn)
                return ClientResponse(resp.status, resp.headers, content)
            except (http.client.HTTPException, ConnectionError, BrokenPipeError, OSError):
                conn.close()
                if attempt:
                    raise
        raise AssertionError("unreachable")
