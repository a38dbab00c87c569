"""Canonical "key = value" text for flat config dataclasses.

One line per field, sorted by name, booleans as true/false. Parsing is
strict: unknown keys are rejected, and a validate() method on the class
runs after construction when present. This text form is what goes into
checkpoints, exports, and run manifests, so it must be deterministic.
"""

from __future__ import annotations

from dataclasses import fields

from .errors import ConfigError


def to_text(obj) -> str:
    lines = []
    for f in sorted(fields(obj), key=lambda f: f.name):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def from_text(cls, text: str):
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line {raw!r}")
        kv[key.strip()] = val.strip()
    types = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(kv) - set(types))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    args = {}
    for name, val in kv.items():
        t = types[name]
        if t == "bool":
            if val not in ("true", "false"):
                raise ConfigError(f"{name} must be true or false, got {val!r}")
            args[name] = val == "true"
        elif t == "int":
            try:
                args[name] = int(val)
            except ValueError:
                raise ConfigError(f"{name} must be an integer, got {val!r}") from None
        elif t == "float":
            try:
                args[name] = float(val)
            except ValueError:
                raise ConfigError(f"{name} must be a number, got {val!r}") from None
        else:
            args[name] = val
    obj = cls(**args)
    if hasattr(obj, "validate"):
        obj.validate()
    return obj
