"""Open-loop login load generator.

Arrivals happen at a fixed rate for the duration, whether or not earlier
logins have finished; that models "users per second" rather than a fixed
worker pool hammering as fast as it can. A login only counts toward the
latency sample if the final RP session check succeeds; failures are
counted, never raised.
"""

from __future__ import annotations

import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from .driver import StackHandle, drive_login

SCENARIOS = ("miso_single", "miso_multi_2of3", "baseline_sso")



def _scenario_target(stack: StackHandle, scenario: str) -> tuple[str, list[str] | None, int | None]:
    """Returns (rp_name, idp_list, m) for a scenario."""
    if scenario == "baseline_sso":
        rp = stack.baseline_rp
        if rp is None:
            raise ValueError("stack has no baseline RP")
        return rp, None, None
    if scenario == "miso_single":
        return stack.rp_names[0], None, None
    if scenario == "miso_multi_2of3":
        return stack.rp_names[0], stack.idp_ids[:3], 2
    raise ValueError(f"unknown scenario {scenario!r}")


def _login_once(stack: StackHandle, scenario: str, user: dict) -> tuple[bool, float, str | None]:
    """One arrival = one distinct user with a fresh browsing context."""
    rp, idp_list, m = _scenario_target(stack, scenario)
    start = time.monotonic()
    outcome = drive_login(stack, rp, user["username"], user["password"],
                          idp_list=idp_list, m=m)
    elapsed_ms = (time.monotonic() - start) * 1000.0
    return outcome.ok and outcome.sub is not None, elapsed_ms, outcome.error


def warm_pool(stack: StackHandle, scenario: str, users: list[dict], workers: int = 16) -> int:
    """One untimed login per pool user before measuring.

    Puts the system in steady state: salt rows and threshold enrollments
    exist, server caches are hot. The measured window then contains only
    returning-user sign-ons, for every scenario alike.
    """
    failures = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for ok, _, _ in pool.map(lambda u: _login_once(stack, scenario, u), users):
            if not ok:
                failures += 1
    return failures


def run_load(stack: StackHandle, scenario: str, rate: float, duration_s: float,
             pool_size: int = 200, max_workers: int = 300) -> dict:
    """Drive `rate` login arrivals per second for `duration_s` seconds."""
    _scenario_target(stack, scenario)  # validate before spawning workers
    users = stack.users()[: max(1, pool_size)]
    total = int(rate * duration_s)
    latencies: list[float] = []
    errors: list[str] = []
    lock = threading.Lock()

    def one(user: dict) -> None:
        try:
            ok, elapsed_ms, error = _login_once(stack, scenario, user)
        except Exception as exc:  # a failed login must never kill the run
            ok, elapsed_ms, error = False, 0.0, repr(exc)
        with lock:
            if ok:
                latencies.append(elapsed_ms)
            else:
                errors.append(error or "unknown")

    if total > 0:
        warm_pool(stack, scenario, users[: min(len(users), total)])
        start = time.monotonic()
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for i in range(total):
                target = start + i / rate
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                pool.submit(one, users[i % len(users)])

    return summarize(scenario, rate, duration_s, latencies, errors)


def summarize(scenario: str, rate: float, duration_s: float,
              latencies: list[float], errors: list[str]) -> dict:
    result = {
        "scenario": scenario,
        "rate": rate,
        "duration_s": duration_s,
        "count": len(latencies),
        "errors": len(errors),
        "error_samples": errors[:5],
        "mean_ms": None,
        "p50_ms": None,
        "p95_ms": None,
    }
    if latencies:
        result["mean_ms"] = statistics.fmean(latencies)
        quantiles = statistics.quantiles(latencies, n=100, method="inclusive") if len(latencies) > 1 else [latencies[0]] * 99
        result["p50_ms"] = quantiles[49]
        result["p95_ms"] = quantiles[94]
    return result


def format_table(results: list[dict]) -> str:
    header = f'{"scenario":<18} {"rate":>6} {"count":>7} {"errors":>7} {"mean ms":>9} {"p50 ms":>9} {"p95 ms":>9}'
    lines = [header, "-" * len(header)]
    for r in results:
        def fmt(v):
            return f"{v:9.1f}" if isinstance(v, float) else f"{'-':>9}"
        lines.append(
            f'{r["scenario"]:<18} {r["rate"]:>6.0f} {r["count"]:>7} {r["errors"]:>7} '
            f'{fmt(r["mean_ms"])} {fmt(r["p50_ms"])} {fmt(r["p95_ms"])}'
        )
    return "\n".join(lines)
