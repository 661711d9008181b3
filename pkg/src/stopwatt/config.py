"""Run configuration: one YAML/JSON file, defaults, and dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from . import __version__


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "corpus_dir": None,
    "output_dir": "out",
    "seed": None,
    "jobs": 1,
    "ingest": {"coverage_slack_ms": 1000, "baseline_cpu_mw": 0.0},
    "feature": {"k": 10, "max_lcs_tokens": 4096},
    "energy": {
        "gap_cap_ms": 1000,
        "classifier_cost_mwh": 0.01,
        "cpu_components": ["cpu"],
        "gpu_components": ["gpu"],
    },
    "selection": {
        "outer_k": 5,
        "inner_k": 3,
        "n_candidates": 16,
        "min_rounds": 10,
        "factor": 3,
        "max_rounds": 270,
    },
    "simulate": {
        "decision_steps": [1, 2, 3, 4, 5],
        "cutoff_step": None,
        # a list of thresholds, or "auto" for every observed confidence value
        "thresholds": {
            "classifier": "grid",
            "random": "grid",
            "min_logprob": "auto",
            "mean_logprob": "auto",
        },
        "grid_size": 101,
        "random_replicates": 100,
        "plot": False,
    },
    "synth": {"n": 200, "success_rate": 0.5, "shift": 1.5},
}

# execution-only keys; they never change results and stay out of the hash
_UNHASHED = ("jobs", "output_dir")


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        path = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(out[key], dict) and key != "thresholds":
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' must be a mapping")
            out[key] = _merge(out[key], value, f"{path}.")
        elif isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' must be a mapping")
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if keys[-1] not in node and keys[-2:-1] != ["thresholds"]:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then the config file, then ``overrides`` (dotted keys).

    Relative paths in the file are resolved against the file's directory.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
        for key in ("corpus_dir", "output_dir"):
            if cfg[key] is not None and key in doc and not Path(cfg[key]).is_absolute():
                cfg[key] = str(path.parent / cfg[key])
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_dotted(cfg, dotted, value)
    return cfg


def parse_value(text: str) -> Any:
    """Parse a ``--set`` value as YAML scalar/list (``3``, ``[1,2]``, ``null``)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad value {text!r}: {exc}") from exc


def config_hash(cfg: dict[str, Any]) -> str:
    doc = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    if doc.get("corpus_dir") is not None:
        doc["corpus_dir"] = Path(doc["corpus_dir"]).name
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def footer(cfg: dict[str, Any]) -> str:
    return f"# stopwatt {__version__} config_hash={config_hash(cfg)}\n"
