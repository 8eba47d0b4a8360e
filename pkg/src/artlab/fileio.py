"""Small file helpers: line-delimited records, config files, fingerprints."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import yaml

from .errors import ConfigError


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: bad record: {exc}") from exc
    return records


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_config_file(path) -> dict:
    """Load a .json or .yaml/.yml config file into a dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    if path.suffix in (".yaml", ".yml"):
        loaded = yaml.safe_load(text)
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        return loaded
    raise ConfigError(f"unsupported config extension: {path.suffix}")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cache_dir() -> Path:
    """Feature/index cache root, overridable via ARTLAB_CACHE."""
    root = os.environ.get("ARTLAB_CACHE")
    if root:
        path = Path(root)
    else:
        path = Path.home() / ".cache" / "artlab"
    path.mkdir(parents=True, exist_ok=True)
    return path
