"""In-process stack fixtures for protocol tests.

Unit and flow tests run every service inside the pytest process (real
sockets, ephemeral ports) so they stay fast and debuggable. Acceptance
tests that need real process boundaries use StackController instead.
"""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import requests

from miso.config import Config
from miso.idp import IdpService
from miso.mixer import MixerService
from miso.rp import RpService
from miso.stack import generate_users, users_manifest, write_idp_fixtures
from miso.harness.driver import StackHandle

TEST_PBKDF2_ITERS = 1000  # fast hashes; protocol tests are not KDF benchmarks


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@dataclass
class LocalStack:
    root: Path
    idps: dict[str, IdpService]
    mixer: MixerService
    rps: dict[str, RpService]
    users: list[dict]
    baseline_rp: RpService | None = None
    _stopped: bool = field(default=False, repr=False)

    @property
    def idp_ids(self) -> list[str]:
        return sorted(self.idps)

    def handle(self) -> StackHandle:
        users_file = self.root / "users.json"
        users_file.write_text(json.dumps(users_manifest(self.users, self.idp_ids)))
        rps = {
            name: {"url": rp.base_url, "baseline": False} for name, rp in self.rps.items()
        }
        if self.baseline_rp is not None:
            rps["rp-base"] = {"url": self.baseline_rp.base_url, "baseline": True}
        return StackHandle({
            "mixer": {"url": self.mixer.base_url},
            "idps": {i: {"url": self.idps[i].base_url} for i in self.idps},
            "rps": rps,
            "users_file": str(users_file),
        })

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        for rp in self.rps.values():
            rp.stop()
        if self.baseline_rp is not None:
            self.baseline_rp.stop()
        self.mixer.stop()
        for idp in self.idps.values():
            idp.stop()


def build_stack(
    root: Path,
    n_idps: int = 1,
    n_rps: int = 1,
    users: list[dict] | None = None,
    mixer_overrides: dict[str, str] | None = None,
    rp_overrides: dict[str, str] | None = None,
    with_baseline: bool = False,
    auto_grant: bool = True,
    debug: bool = True,
) -> LocalStack:
    users = users if users is not None else generate_users(6)
    debug_flag = "true" if debug else "false"
    idp_ids = [f"idp-{chr(ord('a') + i)}" for i in range(n_idps)]

    idps: dict[str, IdpService] = {}
    for idp_id in idp_ids:
        idp_dir = root / idp_id
        idp_dir.mkdir(parents=True, exist_ok=True)
        fixtures = idp_dir / "fixtures.yaml"
        write_idp_fixtures(fixtures, idp_id, users, TEST_PBKDF2_ITERS)
        idp = IdpService(Config({
            "listen_addr": "127.0.0.1:0",
            "state_dir": str(idp_dir),
            "idp_id": idp_id,
            "fixtures": str(fixtures),
            "auto_grant": "true" if auto_grant else "false",
            "debug": debug_flag,
        }))
        idp.start()
        idps[idp_id] = idp

    mixer_port = free_port()
    mixer_url = f"http://127.0.0.1:{mixer_port}"
    mixer_values = {
        "listen_addr": f"127.0.0.1:{mixer_port}",
        "public_url": mixer_url,
        "state_dir": str(root / "mixer"),
        "platform_dir": str(root / "platform"),
        "debug": debug_flag,
        "default_idp": idp_ids[0],
    }
    for idp_id in idp_ids:
        creds = requests.post(f"{idps[idp_id].base_url}/register", json={
            "redirect_uri": f"{mixer_url}/callback",
            "client_name": "MISO Mixer",
        }, timeout=5).json()
        mixer_values[f"idp.{idp_id}.auth_url"] = f"{idps[idp_id].base_url}/auth_IdP"
        mixer_values[f"idp.{idp_id}.token_url"] = f"{idps[idp_id].base_url}/token_IdP"
        mixer_values[f"idp.{idp_id}.res_url"] = f"{idps[idp_id].base_url}/res_IdP"
        mixer_values[f"idp.{idp_id}.client_id"] = creds["client_id"]
        mixer_values[f"idp.{idp_id}.client_secret"] = creds["client_secret"]
    mixer_values.update(mixer_overrides or {})
    mixer = MixerService(Config(mixer_values))
    mixer.start()

    rps: dict[str, RpService] = {}
    for i in range(n_rps):
        name = f"rp{i}"
        rp_values = {
            "listen_addr": "127.0.0.1:0",
            "state_dir": str(root / name),
            "rp_name": f"Demo {name}",
            "provider_url": mixer.base_url,
            "expected_measurement": mixer.enclave.measurement.hex(),
            "tee_pubkey": mixer.platform.getpk().hex(),
            "idp_choices": ",".join(idp_ids),
            "debug": debug_flag,
        }
        rp_values.update(rp_overrides or {})
        rp = RpService(Config(rp_values))
        rp.start()
        rp.bootstrap()
        rps[name] = rp

    baseline = None
    if with_baseline:
        baseline = RpService(Config({
            "listen_addr": "127.0.0.1:0",
            "state_dir": str(root / "rp-base"),
            "rp_name": "Baseline RP",
            "provider_url": idps[idp_ids[0]].base_url,
            "baseline_mode": "true",
            "debug": debug_flag,
        }))
        baseline.start()
        baseline.bootstrap()

    return LocalStack(root=root, idps=idps, mixer=mixer, rps=rps,
                      users=users, baseline_rp=baseline)


@pytest.fixture
def stack_factory(tmp_path):
    built: list[LocalStack] = []

    def factory(**kwargs) -> LocalStack:
        root = tmp_path / f"stack{len(built)}"
        root.mkdir()
        stack = build_stack(root, **kwargs)
        built.append(stack)
        return stack

    yield factory
    for stack in built:
        stack.stop()


@pytest.fixture(scope="module")
def flow_stack(tmp_path_factory):
    """Shared 2-IdP, 2-RP stack for read-mostly flow tests."""
    root = tmp_path_factory.mktemp("flow-stack")
    stack = build_stack(root, n_idps=2, n_rps=2, with_baseline=True)
    yield stack
    stack.stop()
