"""Executable restatements of the unlinkability games.

The formal games quantify over computational adversaries; what runs here
is the sound-but-weaker literal check: the views the games hand to the
adversary must contain nothing that distinguishes the hidden bit. For the
IdP that means its transcript is constant across the originating RP
except for per-login nonces; for RPs it means no value they receive
equals (or contains) a raw identifier or a blinded identifier issued to
another RP. Each game returns a report; an empty `violations` list is a
pass. Detectors are exercised by fault-injection negative controls in the
test suite, so a silent always-empty report would be caught.
"""

from __future__ import annotations

import itertools
import json
import random

from .driver import StackHandle, drive_login

# per-login nonces legitimately differ between trials; everything else
# the IdP sees must be constant no matter which RP started the login
VARYING_PARAMS = {"state", "code"}


def _idp_view_signature(entries: list[dict]) -> list[dict]:
    view = []
    for entry in entries:
        if entry["direction"] != "in":
            continue
        params = entry.get("params", {})
        view.append({
            "endpoint": f'{entry["method"]} {entry["endpoint"]}',
            "param_names": sorted(params),
            "fixed_values": {k: v for k, v in sorted(params.items()) if k not in VARYING_PARAMS},
        })
    return view


def run_game_idp_unlinkability(stack: StackHandle, trials: int, seed: int | None = None,
                               username: str = "alice") -> dict:
    """Log one user into RP_b for random b; diff what the IdPs saw."""
    rng = random.Random(seed)
    rp0, rp1 = stack.rp_names[:2]
    user = stack.user(username)
    reference: list[dict] | None = None
    reference_b: int | None = None
    violations: list[dict] = []
    for trial in range(trials):
        for idp_id in stack.idp_ids:
            stack.transcript(stack.idp_url(idp_id), clear=True)
        b = rng.randint(0, 1)
        outcome = drive_login(stack, rp1 if b else rp0, user["username"], user["password"])
        if not outcome.ok:
            violations.append({"trial": trial, "b": b, "field": "login_failed",
                               "detail": outcome.error})
            continue
        view = []
        for idp_id in stack.idp_ids:
            view.extend(_idp_view_signature(stack.transcript(stack.idp_url(idp_id))))
        if reference is None:
            reference, reference_b = view, b
            continue
        if view != reference:
            violations.append({
                "trial": trial, "b": b, "reference_b": reference_b,
                "field": "idp_view_diff",
                "detail": _first_diff(reference, view),
            })
    return {"game": "idp_unlinkability", "trials": trials, "violations": violations}


def _first_diff(a: list[dict], b: list[dict]) -> str:
    if len(a) != len(b):
        return f"entry count {len(a)} vs {len(b)}"
    for i, (ea, eb) in enumerate(zip(a, b)):
        if ea != eb:
            return f"entry {i}: {json.dumps(ea, sort_keys=True)} vs {json.dumps(eb, sort_keys=True)}"
    return "equal"


def _forbidden_strings(user: dict) -> list[str]:
    """Values whose appearance in an RP view would link the account."""
    out = []
    for uid in (user.get("uids") or {}).values():
        out.append(uid)
        out.append(uid.encode().hex())
    for email in (user.get("emails") or {}).values():
        out.append(email)
    return out


def run_game_rp_unlinkability(stack: StackHandle, trials: int, seed: int | None = None,
                              usernames: tuple[str, str] = ("alice", "bob"),
                              collusive: bool = False) -> dict:
    """Two users enroll at RP0; can RP1's view identify which one came back?"""
    rng = random.Random(seed)
    rp0, rp1 = stack.rp_names[:2]
    users = [stack.user(u) for u in usernames]
    violations: list[dict] = []

    subs_rp0: dict[str, str] = {}
    for user in users:
        outcome = drive_login(stack, rp0, user["username"], user["password"])
        if not outcome.ok or not outcome.sub:
            return {"game": "rp_unlinkability", "trials": 0,
                    "violations": [{"field": "enrollment_failed", "detail": outcome.error}]}
        subs_rp0[user["username"]] = outcome.sub

    for trial in range(trials):
        b = rng.randint(0, 1)
        user = users[b]
        stack.transcript(stack.rp_url(rp1), clear=True)
        outcome = drive_login(stack, rp1, user["username"], user["password"])
        if not outcome.ok or not outcome.sub:
            violations.append({"trial": trial, "b": b, "field": "login_failed",
                               "detail": outcome.error})
            continue
        linkable = set(subs_rp0.values())
        if collusive:
            for u in users:
                linkable.update(_forbidden_strings(u))
                linkable.update(uid for uid in (u.get("uids") or {}).values())
        if outcome.sub in linkable:
            violations.append({"trial": trial, "b": b, "field": "sub_equality",
                               "detail": outcome.sub})
        if collusive:
            view = json.dumps(stack.transcript(stack.rp_url(rp1))) + json.dumps(outcome.attributes)
            view += outcome.sub
            for needle in _forbidden_strings(user):
                if needle in view:
                    violations.append({"trial": trial, "b": b,
                                       "field": "raw_identifier_in_rp_view",
                                       "detail": needle})
    return {
        "game": "collusive_unlinkability" if collusive else "rp_unlinkability",
        "trials": trials,
        "violations": violations,
    }


def run_subset_oracle(stack: StackHandle, rp_name: str | None = None,
                      username: str = "carol", idps: list[str] | None = None,
                      m: int = 2) -> dict:
    """Enroll one user with n IdPs, then attempt every non-empty subset.

    The expected outcome table is the size>=m indicator function; the
    caller compares `outcomes` against `expected`.
    """
    rp_name = rp_name or stack.rp_names[0]
    idps = idps or stack.idp_ids[:3]
    user = stack.user(username)
    enroll = drive_login(stack, rp_name, user["username"], user["password"],
                         idp_list=idps, m=m)
    if not enroll.ok:
        return {"enrolled": False, "error": enroll.error, "outcomes": {}, "expected": {}}
    outcomes: dict[str, dict] = {}
    expected: dict[str, bool] = {}
    for size in range(1, len(idps) + 1):
        for subset in itertools.combinations(idps, size):
            attempt = drive_login(stack, rp_name, user["username"], user["password"],
                                  idp_list=list(subset))
            key = ",".join(subset)
            outcomes[key] = {"ok": attempt.ok, "sub": attempt.sub, "error": attempt.error}
            expected[key] = size >= m
    return {
        "enrolled": True,
        "enroll_sub": enroll.sub,
        "m": m,
        "outcomes": outcomes,
        "expected": expected,
    }
