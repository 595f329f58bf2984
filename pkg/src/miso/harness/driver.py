"""Headless user agent and end-to-end login driver.

The agent behaves like a minimal browser: it follows 302 chains, keeps a
cookie jar per origin (host:port, because every service here shares one
loopback host), and fills in the IdP's login/consent form when one shows
up. It never interprets protocol parameters itself; all state rides in
redirects and cookies exactly as it would for a human.
"""

from __future__ import annotations

import json
import urllib.parse
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path

import requests

from ..webclient import ClientResponse, HttpClient

MAX_STEPS = 40


class _FormParser(HTMLParser):
    """Collect forms and their input fields (enough for our own pages)."""

    def __init__(self) -> None:
        super().__init__()
        self.forms: list[dict] = []
        self._current: dict | None = None

    def handle_starttag(self, tag, attrs):
        attrs = dict(attrs)
        if tag == "form":
            self._current = {
                "id": attrs.get("id", ""),
                "action": attrs.get("action", ""),
                "method": (attrs.get("method") or "get").lower(),
                "fields": {},
            }
            self.forms.append(self._current)
        elif tag == "input" and self._current is not None:
            name = attrs.get("name")
            if name:
                self._current["fields"][name] = attrs.get("value", "")


def parse_forms(html_text: str) -> list[dict]:
    parser = _FormParser()
    parser.feed(html_text)
    return parser.forms


@dataclass
class Step:
    method: str
    url: str
    status: int
    location: str | None = None


@dataclass
class LoginOutcome:
    ok: bool
    sub: str | None = None
    account_id: str | None = None
    attributes: dict = field(default_factory=dict)
    error: str | None = None
    failing_step: int | None = None
    steps: list[Step] = field(default_factory=list)
    stopped_at: str | None = None  # set when navigation hit a stop_prefix


class UserAgent:
    """One browsing context: per-origin cookies, manual redirect following.

    Reusable across logins (the load generator keeps one per worker):
    reset() drops cookies but keeps warm connections.
    """

    def __init__(self, username: str = "", password: str = "", consent: str = "grant",
                 ca_file: str | None = None):
        self.username = username
        self.password = password
        self.consent = consent
        self.cookies: dict[str, dict[str, str]] = {}
        self.http = HttpClient(ca_file=ca_file)

    def close(self) -> None:
        self.http.close()

    def reset(self, username: str, password: str, consent: str = "grant") -> None:
        """New browsing context (fresh cookies), same warm connections."""
        self.username = username
        self.password = password
        self.consent = consent
        self.cookies.clear()

    def _origin(self, url: str) -> str:
        parsed = urllib.parse.urlsplit(url)
        return f"{parsed.scheme}://{parsed.netloc}"

    def _store_cookies(self, url: str, resp: ClientResponse) -> None:
        headers = resp.header_all("Set-Cookie")
        if not headers:
            return
        jar = self.cookies.setdefault(self._origin(url), {})
        for header in headers:
            pair = header.split(";", 1)[0]
            name, _, value = pair.partition("=")
            if name:
                jar[name.strip()] = value.strip()

    def request(self, method: str, url: str, data: dict | None = None) -> ClientResponse:
        headers = {}
        jar = self.cookies.get(self._origin(url))
        if jar:
            headers["Cookie"] = "; ".join(f"{k}={v}" for k, v in jar.items())
        resp = self.http.request(method, url, data=data, headers=headers)
        self._store_cookies(url, resp)
        return resp

    def get(self, url: str) -> ClientResponse:
        return self.request("GET", url)

    def navigate(self, url: str, stop_prefix: str | None = None) -> LoginOutcome:
        """Follow redirects and login forms until a terminal response.

        `stop_prefix`: stop *before* requesting a redirect target that
        starts with this prefix and report it (used when the harness
        itself plays the RP and wants the raw callback URL).
        """
        outcome = LoginOutcome(ok=False)
        current: ClientResponse | None = None
        method, data = "GET", None
        for _ in range(MAX_STEPS):
            resp = self.request(method, url, data=data)
            step = Step(method=method, url=url, status=resp.status_code,
                        location=resp.header("Location"))
            outcome.steps.append(step)
            if resp.status_code in (301, 302, 303, 307):
                target = urllib.parse.urljoin(url, resp.header("Location") or "")
                if stop_prefix and target.startswith(stop_prefix):
                    outcome.stopped_at = target
                    outcome.ok = True
                    return outcome
                url, method, data = target, "GET", None
                continue
            if resp.status_code == 200 and "text/html" in (resp.header("Content-Type") or ""):
                login_forms = [f for f in parse_forms(resp.text) if f["id"] == "login"]
                if login_forms:
                    form = login_forms[0]
                    fields = dict(form["fields"])
                    fields["username"] = self.username
                    fields["password"] = self.password
                    fields["consent"] = self.consent
                    url = urllib.parse.urljoin(url, form["action"] or url)
                    method, data = form["method"].upper(), fields
                    continue
            current = resp
            break
        if current is None:
            outcome.error = "too_many_steps"
            outcome.failing_step = len(outcome.steps) - 1
            return outcome
        outcome.ok = 200 <= current.status_code < 300
        if not outcome.ok:
            outcome.failing_step = len(outcome.steps) - 1
            try:
                outcome.error = current.json().get("error", f"http_{current.status_code}")
            except ValueError:
                outcome.error = f"http_{current.status_code}"
        return outcome


class StackHandle:
    """Convenience view over a stack descriptor for harness code."""

    def __init__(self, descriptor: dict):
        self.descriptor = descriptor
        self._users: list[dict] | None = None

    @classmethod
    def from_state_dir(cls, state_dir) -> "StackHandle":
        desc = json.loads((Path(state_dir) / "stack.json").read_text())
        return cls(desc)

    @property
    def mixer_url(self) -> str:
        return self.descriptor["mixer"]["url"]

    @property
    def ca_file(self) -> str | None:
        """Trust anchor for the mixer's TLS endpoint, when it runs TLS."""
        return self.descriptor["mixer"].get("ca") or None

    @property
    def idp_ids(self) -> list[str]:
        return sorted(self.descriptor["idps"])

    def idp_url(self, idp_id: str) -> str:
        return self.descriptor["idps"][idp_id]["url"]

    @property
    def rp_names(self) -> list[str]:
        return sorted(name for name, entry in self.descriptor["rps"].items()
                      if not entry.get("baseline"))

    @property
    def baseline_rp(self) -> str | None:
        for name, entry in self.descriptor["rps"].items():
            if entry.get("baseline"):
                return name
        return None

    def rp_url(self, name: str) -> str:
        return self.descriptor["rps"][name]["url"]

    def users(self) -> list[dict]:
        if self._users is None:
            self._users = json.loads(Path(self.descriptor["users_file"]).read_text())["users"]
        return self._users

    def user(self, username: str) -> dict:
        for entry in self.users():
            if entry["username"] == username:
                return entry
        raise KeyError(username)

    # -- transcript taps ----------------------------------------------------

    def transcript(self, url: str, clear: bool = False) -> list[dict]:
        params = {"clear": "1"} if clear else {}
        verify = self.ca_file if url.startswith("https") else True
        resp = requests.get(f"{url}/debug/transcript", params=params, timeout=10,
                            verify=verify)
        resp.raise_for_status()
        return resp.json()["entries"]

    def clear_transcripts(self) -> None:
        urls = [self.mixer_url]
        urls += [self.idp_url(i) for i in self.idp_ids]
        urls += [entry["url"] for entry in self.descriptor["rps"].values()]
        for url in urls:
            self.transcript(url, clear=True)


def drive_login(stack: StackHandle, rp_name: str, username: str, password: str,
                idp_list: list[str] | None = None, m: int | None = None,
                consent: str = "grant", ua: UserAgent | None = None) -> LoginOutcome:
    """Run one end-to-end login like a browser would; return what the RP saw.

    Pass `ua` to reuse an agent's warm connections; its cookies are reset
    so each call is still a fresh browsing context.
    """
    owns_ua = ua is None
    if ua is None:
        ua = UserAgent(username=username, password=password, consent=consent,
                       ca_file=stack.ca_file)
    else:
        ua.reset(username, password, consent)
    try:
        base = stack.rp_url(rp_name)
        params = {}
        if idp_list:
            params["idp_list"] = ",".join(idp_list)
        if m is not None:
            params["m"] = str(m)
        qs = f"?{urllib.parse.urlencode(params)}" if params else ""
        outcome = ua.navigate(f"{base}/login/start{qs}")
        if not outcome.ok:
            return outcome
        me = ua.get(f"{base}/me")
        if me.status_code != 200:
            outcome.ok = False
            outcome.failing_step = len(outcome.steps)
            # surface the OAuth error the provider sent back, if any
            last_query = urllib.parse.parse_qs(urllib.parse.urlsplit(outcome.steps[-1].url).query)
            outcome.error = last_query.get("error", ["session_check_failed"])[0]
            return outcome
        body = me.json()
        outcome.sub = body.get("sub")
        outcome.account_id = body.get("account_id")
        outcome.attributes = body.get("attributes", {})
        return outcome
    finally:
        if owns_ua:
            ua.close()
