"""Run configuration: one YAML file with a section per command."""

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, TypeVar

import yaml

from utils.errors import ValidationError

SEED_ENV_VAR = "LATENT_DEMAND_SEED"
SECTIONS = ("simulate", "synthetic", "train", "model", "evaluate", "compete", "experiment")

T = TypeVar("T")


def load_config(path: str | Path | None) -> dict[str, dict]:
    """Read a YAML (or JSON) config file. A missing path gives an empty config."""
    if path is None:
        return {name: {} for name in SECTIONS}

    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")

    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ValidationError(f"{path}: invalid YAML: {e}") from e

    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be a mapping of sections")

    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown)}")

    config = {name: dict(raw.get(name) or {}) for name in SECTIONS}
    logging.info("Loaded config from %s", path)
    return config


def from_mapping(cls: type[T], mapping: dict[str, Any] | None, section: str) -> T:
    """Build a config dataclass from a mapping, rejecting keys it does not declare."""
    mapping = dict(mapping or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ValidationError(f"[{section}] unknown keys {sorted(unknown)}")

    for key, value in mapping.items():
        # YAML has no tuples
        if isinstance(value, list):
            mapping[key] = tuple(value)
    try:
        return cls(**mapping)
    except TypeError as e:
        raise ValidationError(f"[{section}] {e}") from e


def resolve_seed(cli_seed: int | None, section: dict[str, Any] | None = None) -> int:
    """CLI flag, then config key, then environment, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if section and section.get("seed") is not None:
        return int(section["seed"])
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed:
        try:
            return int(env_seed)
        except ValueError as e:
            raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from e
    return 0


def config_hash(config: dict) -> str:
    """Digest of the canonical JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
