"""Plain-text ``key = value`` configuration files with dotted keys.

    # comments start with '#'
    scene.frames = 30
    train.iterations = 5000
    body.joint.1 = l_arm 0  0.2 0.5 0  0.45 0 0  0.075

Values stay strings until read through one of the typed getters, so a file
round-trips exactly and ``--override key=value`` can replace anything.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Invalid or missing configuration."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class Config:
    def __init__(self, values: dict[str, str] | None = None, source: str = "<memory>"):
        self.values: dict[str, str] = dict(values or {})
        self.source = source

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls(parse(path.read_text(), str(path)), str(path))

    def copy(self) -> "Config":
        return Config(dict(self.values), self.source)

    def apply_overrides(self, overrides) -> "Config":
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, val = item.split("=", 1)
            self.values[key.strip()] = val.strip()
        return self

    def set(self, key: str, val) -> None:
        if isinstance(val, (list, tuple)):
            val = " ".join(str(v) for v in val)
        self.values[key] = str(val)

    def __contains__(self, key):
        return key in self.values

    def _raw(self, key, default):
        if key in self.values:
            return self.values[key]
        if default is _MISSING:
            raise ConfigError(f"{self.source}: missing key {key!r}")
        return None

    def get_str(self, key, default=None):
        raw = self._raw(key, _MISSING if default is None else default)
        return default if raw is None else raw

    def get_int(self, key, default=None):
        raw = self._raw(key, _MISSING if default is None else default)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: {key} expects an integer, got {raw!r}") from None

    def get_float(self, key, default=None):
        raw = self._raw(key, _MISSING if default is None else default)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: {key} expects a number, got {raw!r}") from None

    def get_bool(self, key, default=None):
        raw = self._raw(key, _MISSING if default is None else default)
        if raw is None:
            return default
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{self.source}: {key} expects a boolean, got {raw!r}")

    def get_floats(self, key, default=None):
        raw = self._raw(key, _MISSING if default is None else default)
        if raw is None:
            return list(default)
        try:
            return [float(v) for v in raw.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"{self.source}: {key} expects numbers, got {raw!r}") from None

    def section(self, prefix: str) -> dict[str, str]:
        """All keys under ``prefix.`` with the prefix stripped."""
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


class _Missing:
    pass


_MISSING = _Missing()


def parse(text: str, source: str = "<string>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = val.strip()
    return values
