"""Key-value configuration file named by ``MAILSCAN_CONFIG``.

Format: one ``key = value`` per line, ``#`` comments, keys matching the long
CLI flag names with dashes or underscores.  Precedence is command-line flag,
then file, then built-in default.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path

ENV_VAR = "MAILSCAN_CONFIG"

DEFAULTS: dict[str, object] = {
    "arch": None,
    "acfg_threshold": None,
    "swod_k": None,
    "index_len": 16,
    "combinator": "EITHER",
    "size_bound": 256,
    "calibrate": True,
    "calibration_fraction": 0.25,
    "seed": 0,
    "folds": 10,
    "jobs": 1,
    "intensity": 0.5,
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str) -> object:
    proto = DEFAULTS.get(key)
    try:
        if isinstance(proto, bool):
            return _BOOL[raw.lower()]
        if isinstance(proto, int):
            return int(raw, 0)
        if isinstance(proto, float) or key == "acfg_threshold":
            return float(raw)
        if key == "swod_k":
            return int(raw, 0)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def load_config(path: str | Path | None = None) -> dict[str, object]:
    """Values from the config file (``MAILSCAN_CONFIG`` when ``path`` is None)."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string("[mailscan]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out = {}
    for key, raw in parser["mailscan"].items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw.strip())
    return out


def resolve(flags: dict[str, object], file_values: dict[str, object]) -> dict[str, object]:
    """Merge with flag > file > default precedence; ``None`` flags count as unset."""
    out = dict(DEFAULTS)
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out
