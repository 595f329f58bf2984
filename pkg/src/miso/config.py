"""Key-value text config files.

Format: one `key = value` pair per line, `#` comments, blank lines
ignored. Values are strings; typed accessors live on Config. IdP entries
use dotted keys (`idp.github.auth_url = ...`) and are regrouped by id.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(Exception):
    pass


class Config:
    def __init__(self, values: dict[str, str] | None = None, source: str | None = None):
        self.values: dict[str, str] = dict(values or {})
        self.source = source

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        values: dict[str, str] = {}
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls(values, source=str(path))

    def dump(self, path: str | Path) -> None:
        lines = [f"{k} = {v}" for k, v in sorted(self.values.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def require(self, key: str) -> str:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"missing required config key {key!r}"
                              + (f" in {self.source}" if self.source else "")) from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        return raw.lower() in ("1", "true", "yes", "on")

    def get_int(self, key: str, default: int) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} must be a number, got {raw!r}") from None

    def idp_entries(self) -> dict[str, dict[str, str]]:
        """Group `idp.<id>.<field>` keys into {id: {field: value}}."""
        out: dict[str, dict[str, str]] = {}
        for key, value in self.values.items():
            if not key.startswith("idp."):
                continue
            rest = key[len("idp."):]
            idp_id, _, fieldname = rest.rpartition(".")
            if not idp_id:
                raise ConfigError(f"malformed idp key {key!r}")
            out.setdefault(idp_id, {})[fieldname] = value
        return out

    def listen_addr(self) -> tuple[str, int]:
        raw = self.require("listen_addr")
        host, _, port = raw.rpartition(":")
        if not host:
            raise ConfigError(f"listen_addr must be host:port, got {raw!r}")
        try:
            return host, int(port)
        except ValueError:
            raise ConfigError(f"listen_addr port must be an integer, got {raw!r}") from None
