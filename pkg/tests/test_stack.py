"""Deployment controller: bring-up, teardown, preserved-state restarts.

These spawn real child processes, so they use a small topology and a
port range away from the other suites.
"""

import json

import pytest
import requests

from miso.stack import StackController, StackError, Topology
from miso.harness.driver import StackHandle, drive_login

BASE_PORT = 9700


def small_topology(**overrides):
    defaults = dict(idps=1, rps=1, users=4, base_port=BASE_PORT,
                    with_baseline=False, pbkdf2_iterations=1000)
    defaults.update(overrides)
    return Topology(**defaults)


@pytest.fixture
def controller(tmp_path):
    ctl = StackController(tmp_path / "stack")
    yield ctl
    ctl.down(wipe=False)


class TestUpDown:
    def test_up_reports_services_and_all_healthy(self, controller):
        desc = controller.up(small_topology(rps=2, with_baseline=True))
        assert set(desc["idps"]) == {"idp-a"}
        assert set(desc["rps"]) == {"rp0", "rp1", "rp-base"}
        status = controller.status()
        assert status["running"]
        assert all(s["healthy"] for s in status["services"].values())

    def test_up_twice_fails_cleanly(self, controller):
        controller.up(small_topology())
        with pytest.raises(StackError, match="already present"):
            controller.up(small_topology())

    def test_port_conflict_aborts(self, controller, tmp_path):
        controller.up(small_topology())
        other = StackController(tmp_path / "other")
        with pytest.raises(StackError, match="already in use"):
            other.up(small_topology())

    def test_down_is_noop_when_stopped(self, controller):
        assert controller.down() is False

    def test_down_preserves_sealed_state(self, controller):
        controller.up(small_topology())
        state_dir = controller.state_dir
        assert controller.down(wipe=False) is True
        assert (state_dir / "mixer" / "prf_key.sealed").exists()
        assert controller.status() == {"running": False}

    def test_down_wipe_removes_state(self, controller):
        controller.up(small_topology())
        state_dir = controller.state_dir
        controller.down(wipe=True)
        assert not state_dir.exists()

    def test_end_to_end_login_through_spawned_stack(self, controller):
        desc = controller.up(small_topology())
        outcome = drive_login(StackHandle(desc), "rp0", "alice", "pw-alice")
        assert outcome.ok
        assert len(outcome.sub) == 64


class TestPreservedState:
    def test_reup_keeps_measurement_keys_and_subs(self, controller):
        desc1 = controller.up(small_topology())
        handle = StackHandle(desc1)
        sub_before = drive_login(handle, "rp0", "alice", "pw-alice").sub
        attestation1 = requests.get(f"{desc1['mixer']['url']}/attestation",
                                    verify=desc1["mixer"]["ca"] or True).json()
        pinned1 = json.loads((controller.state_dir / "rp0" / "pinned.json").read_text())
        controller.down(wipe=False)

        desc2 = controller.up(small_topology())
        assert desc2["measurement"] == desc1["measurement"]
        attestation2 = requests.get(f"{desc2['mixer']['url']}/attestation",
                                    verify=desc2["mixer"]["ca"] or True).json()
        assert attestation2["pk_server"] == attestation1["pk_server"]
        pinned2 = json.loads((controller.state_dir / "rp0" / "pinned.json").read_text())
        assert pinned2["pk_server"] == pinned1["pk_server"]
        sub_after = drive_login(StackHandle(desc2), "rp0", "alice", "pw-alice").sub
        assert sub_after == sub_before

    def test_reup_does_not_duplicate_registrations(self, controller):
        controller.up(small_topology())
        creds1 = json.loads((controller.state_dir / "rp0" / "credentials.json").read_text())
        controller.down(wipe=False)
        controller.up(small_topology())
        creds2 = json.loads((controller.state_dir / "rp0" / "credentials.json").read_text())
        assert creds1 == creds2
        idp_clients = json.loads((controller.state_dir / "idp-a" / "clients.json").read_text())
        # one mixer registration plus one rp0 registration, not doubled
        assert len(idp_clients) == 1

    def test_restart_mixer_keeps_subs(self, controller):
        desc = controller.up(small_topology())
        handle = StackHandle(desc)
        before = drive_login(handle, "rp0", "alice", "pw-alice").sub
        controller.restart_mixer()
        after = drive_login(handle, "rp0", "alice", "pw-alice").sub
        assert after == before


class TestCliSurface:
    def test_harness_cli_login_games_subsets(self, controller, capsys):
        from miso.harness import cli as harness_cli
        controller.up(small_topology(idps=3, rps=2))
        state = str(controller.state_dir)
        assert harness_cli.main(["--state-dir", state, "login", "--user", "alice"]) == 0
        assert harness_cli.main(["--state-dir", state, "login", "--user", "alice",
                                 "--deny"]) == 1
        assert harness_cli.main(["--state-dir", state, "game", "idp", "--trials", "2"]) == 0
        assert harness_cli.main(["--state-dir", state, "game", "collusive",
                                 "--trials", "2"]) == 0
        assert harness_cli.main(["--state-dir", state, "subsets", "--user", "bob",
                                 "--m", "2"]) == 0
        out = capsys.readouterr().out
        assert '"ok": true' in out

    def test_miso_cli_status_without_stack(self, tmp_path, capsys):
        from miso import cli as miso_cli
        assert miso_cli.main(["--state-dir", str(tmp_path), "status"]) == 0
        assert '"running": false' in capsys.readouterr().out

    def test_miso_cli_down_noop(self, tmp_path, capsys):
        from miso import cli as miso_cli
        assert miso_cli.main(["--state-dir", str(tmp_path), "down"]) == 0
        assert "no-op" in capsys.readouterr().out
