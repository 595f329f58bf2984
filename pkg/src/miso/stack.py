"""Bring a whole login stack up on loopback: N IdPs, the mixer, M RPs.

Services run as child processes so they behave like the separate parties
they model (and so a mixer restart is a real process restart). Bring-up
order follows registration dependencies: IdPs first, then the mixer is
registered at each IdP and started, then RPs which verify attestation and
register themselves. A descriptor JSON written at the state root records
ports, pids, and key material fingerprints for the harness.

Re-running `up` against a preserved state directory reuses every config
and registration it finds, so identifiers stay stable across restarts.
"""

from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .config import Config
from .enclave import EnclavePlatform, measure
from .idp import hash_password
from .mixer import DEFAULT_PROGRAM_DESCRIPTOR

DESCRIPTOR_NAME = "stack.json"
MIXER_CLIENT_NAME = "MISO Mixer"

NAMED_USERS = ("alice", "bob", "carol")


class StackError(Exception):
    pass


def default_state_dir() -> Path:
    return Path(os.environ.get("MISO_STATE_DIR", "miso-state"))


@dataclass
class Topology:
    idps: int = 3
    rps: int = 2
    seal_mode: str = "mrenclave"
    users: int = 256
    base_port: int = 9400
    debug: bool = True
    auto_grant: bool = True
    with_baseline: bool = True
    tls_mixer: bool = True  # mixer terminates TLS with its attested key
    program_descriptor: str = DEFAULT_PROGRAM_DESCRIPTOR
    pbkdf2_iterations: int = 10_000
    extra_mixer_config: dict[str, str] = field(default_factory=dict)


def generate_users(count: int) -> list[dict]:
    """Deterministic user pool: named fixtures first, then user0001..."""
    users = [{"username": name, "password": f"pw-{name}"} for name in NAMED_USERS]
    for i in range(1, max(0, count - len(NAMED_USERS)) + 1):
        users.append({"username": f"user{i:04d}", "password": f"pw-user{i:04d}"})
    return users[:max(count, len(NAMED_USERS))]


def users_manifest(users: list[dict], idp_ids: list[str]) -> dict:
    """The harness-facing user list, with per-IdP raw ids and emails spelled out."""
    return {
        "users": [
            {
                **user,
                "uids": {i: f"{user['username']}.{i}" for i in idp_ids},
                "emails": {i: f"{user['username']}@{i}.test" for i in idp_ids},
            }
            for user in users
        ],
        "idps": idp_ids,
    }


def write_idp_fixtures(path: Path, idp_id: str, users: list[dict], iterations: int) -> None:
    lines = ["users:"]
    for user in users:
        username = user["username"]
        lines += [
            f"  - uid: {username}.{idp_id}",
            f"    username: {username}",
            f"    password_hash: {hash_password(user['password'], iterations)}",
            "    attributes:",
            f"      email: {username}@{idp_id}.test",
            f"      display_name: {username.title()} ({idp_id})",
        ]
    path.write_text("\n".join(lines) + "\n")


def _port_free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        # match the server's own bind semantics (TIME_WAIT remnants are fine)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(("127.0.0.1", port))
            return True
        except OSError:
            return False


def _wait_healthy(url: str, timeout: float = 20.0, condition: str | None = None,
                  verify=True) -> dict:
    """Poll /healthz until it answers 200 (and `condition` is truthy, if given)."""
    deadline = time.time() + timeout
    last_err = None
    while time.time() < deadline:
        try:
            resp = requests.get(f"{url}/healthz", timeout=2, verify=verify)
            if resp.status_code == 200:
                body = resp.json()
                if condition is None or body.get(condition):
                    return body
                last_err = f"{condition} still false"
            else:
                last_err = f"status {resp.status_code}: {resp.text[:200]}"
        except (requests.RequestException, OSError) as exc:
            # OSError: the mixer writes its cert file during startup; the
            # verifier can't load it until that happens
            last_err = str(exc)
        time.sleep(0.1)
    raise StackError(f"service at {url} never became healthy ({last_err})")


class StackController:
    """Owns the child processes of one running stack."""

    def __init__(self, state_dir: str | Path | None = None):
        self.state_dir = Path(state_dir) if state_dir else default_state_dir()
        self.procs: dict[str, subprocess.Popen] = {}

    # -- descriptor -------------------------------------------------------------

    @property
    def descriptor_path(self) -> Path:
        return self.state_dir / DESCRIPTOR_NAME

    def read_descriptor(self) -> dict | None:
        if self.descriptor_path.exists():
            return json.loads(self.descriptor_path.read_text())
        return None

    def _write_descriptor(self, desc: dict) -> None:
        tmp = self.descriptor_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(desc, indent=2))
        os.replace(tmp, self.descriptor_path)

    # -- process management -------------------------------------------------------

    def _spawn(self, name: str, module: str, config_path: Path) -> subprocess.Popen:
        logs = self.state_dir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        logfile = open(logs / f"{name}.log", "ab")
        proc = subprocess.Popen(
            [sys.executable, "-m", module, "--config", str(config_path)],
            stdout=logfile, stderr=subprocess.STDOUT,
        )
        logfile.close()
        self.procs[name] = proc
        return proc

    def _stop_proc(self, name: str, pid: int) -> None:
        proc = self.procs.get(name)
        try:
            if proc is not None:
                proc.terminate()
                try:
                    proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait(timeout=5)
            elif pid:
                os.kill(pid, signal.SIGTERM)
                for _ in range(50):
                    time.sleep(0.1)
                    os.kill(pid, 0)
                os.kill(pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        self.procs.pop(name, None)

    # -- up ------------------------------------------------------------------------

    def up(self, topo: Topology | None = None) -> dict:
        topo = topo or Topology()
        if self.read_descriptor() is not None:
            raise StackError(
                f"stack descriptor already present at {self.descriptor_path}; "
                "run `miso down` first"
            )
        self.state_dir.mkdir(parents=True, exist_ok=True)

        idp_ids = [f"idp-{chr(ord('a') + i)}" for i in range(topo.idps)]
        ports: dict[str, int] = {}
        next_port = topo.base_port
        for idp_id in idp_ids:
            ports[idp_id] = next_port
            next_port += 1
        ports["mixer"] = next_port
        next_port += 1
        rp_names = [f"rp{i}" for i in range(topo.rps)]
        for rp in rp_names:
            ports[rp] = next_port
            next_port += 1
        if topo.with_baseline:
            ports["rp-base"] = next_port
        for name, port in ports.items():
            if not _port_free(port):
                raise StackError(f"port {port} (for {name}) is already in use")

        try:
            return self._bring_up(topo, idp_ids, rp_names, ports)
        except Exception:
            self._teardown_procs(list(self.procs))
            raise

    def _bring_up(self, topo: Topology, idp_ids: list[str], rp_names: list[str],
                  ports: dict[str, int]) -> dict:
        platform_dir = self.state_dir / "platform"
        platform = EnclavePlatform(platform_dir)
        pk_tee = platform.getpk().hex()
        measurement = measure(topo.program_descriptor.encode()).hex()

        users = generate_users(topo.users)
        users_file = self.state_dir / "users.json"
        if not users_file.exists():
            users_file.write_text(json.dumps(users_manifest(users, idp_ids), indent=2))

        # --- identity providers ---
        debug_flag = "true" if topo.debug else "false"
        for idp_id in idp_ids:
            idp_dir = self.state_dir / idp_id
            idp_dir.mkdir(exist_ok=True)
            fixtures = idp_dir / "fixtures.yaml"
            if not fixtures.exists():
                write_idp_fixtures(fixtures, idp_id, users, topo.pbkdf2_iterations)
            config_path = idp_dir / "config.conf"
            if not config_path.exists():
                Config({
                    "listen_addr": f"127.0.0.1:{ports[idp_id]}",
                    "state_dir": str(idp_dir),
                    "idp_id": idp_id,
                    "fixtures": str(fixtures),
                    "auto_grant": "true" if topo.auto_grant else "false",
                    "debug": debug_flag,
                    "ui_dir": _ui_dir(),
                }).dump(config_path)
            self._spawn(idp_id, "miso.idp", config_path)
        idp_urls = {i: f"http://127.0.0.1:{ports[i]}" for i in idp_ids}
        for idp_id in idp_ids:
            _wait_healthy(idp_urls[idp_id])

        # --- mixer (register at each IdP first) ---
        mixer_dir = self.state_dir / "mixer"
        mixer_dir.mkdir(exist_ok=True)
        mixer_scheme = "https" if topo.tls_mixer else "http"
        mixer_url = f"{mixer_scheme}://127.0.0.1:{ports['mixer']}"
        mixer_ca = str(mixer_dir / "server_cert.pem") if topo.tls_mixer else ""
        mixer_config_path = mixer_dir / "config.conf"
        if not mixer_config_path.exists():
            values = {
                "listen_addr": f"127.0.0.1:{ports['mixer']}",
                "public_url": mixer_url,
                "state_dir": str(mixer_dir),
                "platform_dir": str(platform_dir),
                "seal_mode": topo.seal_mode,
                "program_descriptor": topo.program_descriptor,
                "tls": "true" if topo.tls_mixer else "false",
                "debug": debug_flag,
                "default_idp": idp_ids[0],
                "ui_dir": _ui_dir(),
            }
            for idp_id in idp_ids:
                creds = requests.post(f"{idp_urls[idp_id]}/register", json={
                    "redirect_uri": f"{mixer_url}/callback",
                    "client_name": MIXER_CLIENT_NAME,
                }, timeout=10)
                if creds.status_code != 200:
                    raise StackError(f"mixer registration at {idp_id} failed: {creds.text}")
                body = creds.json()
                values[f"idp.{idp_id}.auth_url"] = f"{idp_urls[idp_id]}/auth_IdP"
                values[f"idp.{idp_id}.token_url"] = f"{idp_urls[idp_id]}/token_IdP"
                values[f"idp.{idp_id}.res_url"] = f"{idp_urls[idp_id]}/res_IdP"
                values[f"idp.{idp_id}.client_id"] = body["client_id"]
                values[f"idp.{idp_id}.client_secret"] = body["client_secret"]
            values.update(topo.extra_mixer_config)
            Config(values).dump(mixer_config_path)
        self._spawn("mixer", "miso.mixer", mixer_config_path)
        _wait_healthy(mixer_url, verify=mixer_ca or True)

        # --- relying parties ---
        rp_urls: dict[str, str] = {}
        for rp in rp_names:
            rp_dir = self.state_dir / rp
            rp_dir.mkdir(exist_ok=True)
            rp_url = f"http://127.0.0.1:{ports[rp]}"
            rp_urls[rp] = rp_url
            config_path = rp_dir / "config.conf"
            if not config_path.exists():
                Config({
                    "listen_addr": f"127.0.0.1:{ports[rp]}",
                    "public_url": rp_url,
                    "state_dir": str(rp_dir),
                    "rp_name": f"Demo {rp}",
                    "provider_url": mixer_url,
                    "expected_measurement": measurement,
                    "tee_pubkey": pk_tee,
                    "tls_ca": mixer_ca,
                    "idp_choices": ",".join(idp_ids),
                    "debug": debug_flag,
                    "ui_dir": _ui_dir(),
                }).dump(config_path)
            self._spawn(rp, "miso.rp", config_path)
        if topo.with_baseline:
            rp_dir = self.state_dir / "rp-base"
            rp_dir.mkdir(exist_ok=True)
            rp_url = f"http://127.0.0.1:{ports['rp-base']}"
            rp_urls["rp-base"] = rp_url
            config_path = rp_dir / "config.conf"
            if not config_path.exists():
                Config({
                    "listen_addr": f"127.0.0.1:{ports['rp-base']}",
                    "public_url": rp_url,
                    "state_dir": str(rp_dir),
                    "rp_name": "Baseline RP",
                    "provider_url": idp_urls[idp_ids[0]],
                    "baseline_mode": "true",
                    "debug": debug_flag,
                    "ui_dir": _ui_dir(),
                }).dump(config_path)
            self._spawn("rp-base", "miso.rp", config_path)
        for rp, url in rp_urls.items():
            _wait_healthy(url, condition="registered")

        desc = {
            "created_at": time.time(),
            "state_dir": str(self.state_dir),
            "measurement": measurement,
            "pk_tee": pk_tee,
            "users_file": str(users_file),
            "mixer": {"url": mixer_url, "pid": self.procs["mixer"].pid,
                      "config": str(mixer_config_path), "ca": mixer_ca},
            "idps": {i: {"url": idp_urls[i], "pid": self.procs[i].pid,
                         "config": str(self.state_dir / i / "config.conf")} for i in idp_ids},
            "rps": {r: {"url": rp_urls[r], "pid": self.procs[r].pid,
                        "config": str(self.state_dir / r / "config.conf"),
                        "baseline": r == "rp-base"} for r in rp_urls},
        }
        self._write_descriptor(desc)
        return desc

    # -- down / status ----------------------------------------------------------------

    def _teardown_procs(self, names: list[str], pids: dict[str, int] | None = None) -> None:
        pids = pids or {}
        for name in names:
            self._stop_proc(name, pids.get(name, 0))

    def down(self, wipe: bool = False) -> bool:
        desc = self.read_descriptor()
        if desc is None:
            return False
        pids = {name: entry["pid"] for name, entry in desc["rps"].items()}
        rp_order = sorted(desc["rps"])
        self._teardown_procs(rp_order, pids)
        self._teardown_procs(["mixer"], {"mixer": desc["mixer"]["pid"]})
        idp_pids = {name: entry["pid"] for name, entry in desc["idps"].items()}
        self._teardown_procs(sorted(desc["idps"]), idp_pids)
        self.descriptor_path.unlink(missing_ok=True)
        if wipe:
            import shutil
            shutil.rmtree(self.state_dir, ignore_errors=True)
        return True

    def status(self) -> dict:
        desc = self.read_descriptor()
        if desc is None:
            return {"running": False}
        out = {"running": True, "services": {}}
        services = {"mixer": desc["mixer"], **desc["idps"], **desc["rps"]}
        for name, entry in services.items():
            try:
                resp = requests.get(f"{entry['url']}/healthz", timeout=2,
                                    verify=entry.get("ca") or True)
                out["services"][name] = {"url": entry["url"], "healthy": resp.status_code == 200}
            except (requests.RequestException, OSError):
                out["services"][name] = {"url": entry["url"], "healthy": False}
        return out

    def restart_mixer(self) -> None:
        """Stop and relaunch the mixer with its existing config (state preserved)."""
        desc = self.read_descriptor()
        if desc is None:
            raise StackError("no running stack")
        self._stop_proc("mixer", desc["mixer"]["pid"])
        self._spawn("mixer", "miso.mixer", Path(desc["mixer"]["config"]))
        _wait_healthy(desc["mixer"]["url"], verify=desc["mixer"].get("ca") or True)
        desc["mixer"]["pid"] = self.procs["mixer"].pid
        self._write_descriptor(desc)


def _ui_dir() -> str:
    """Built web console assets, when the frontend has been built."""
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return str(candidate) if candidate.is_dir() else ""
