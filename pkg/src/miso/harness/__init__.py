"""Headless experiment harness: drives full login redirect chains,
replays the privacy games as transcript assertions, brute-forces the
threshold subset table, and measures login latency under load."""

from .driver import LoginOutcome, StackHandle, UserAgent, drive_login

__all__ = ["LoginOutcome", "StackHandle", "UserAgent", "drive_login"]
