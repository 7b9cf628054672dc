"""Run-config loading: TOML (or a JSON mirror) validated against the bundled schema."""

from __future__ import annotations

import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def schema() -> dict:
    with resources.files("qbayes").joinpath("data/config.schema.json").open("r") as fh:
        return json.load(fh)


def validate(doc: dict) -> dict:
    validator = jsonschema.Draft7Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}")
    return doc


def load(path) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        if p.suffix.lower() == ".json":
            doc = json.loads(raw.decode())
        else:
            doc = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    return validate(doc)


def require(doc: dict, *sections: str) -> None:
    missing = [s for s in sections if s not in doc]
    if missing:
        raise ConfigError(f"config is missing required section(s): {', '.join(missing)}")
