"""Run configuration: one JSON document for every command, loaded strictly.

Unknown keys are rejected at any depth with their dotted path, so a typo in
a config file never silently falls back to a default. Precedence is
defaults < config file < command-line flags.
"""

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from finetrack.core import FinetrackError
from finetrack.pipeline import TrackerConfig


class ConfigError(FinetrackError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}" if key else f"config: {message}")
        self.key = key
        self.detail = message


@dataclass
class RunConfig:
    """Effective settings of one ftrack invocation."""
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    seed: int = 0                        # single source of randomness, copied into tracker.seed
                                         # (a file may repeat it there, but not contradict it)
    head: Optional[str] = None           # offline scorer head for `track`
    workers: int = 1                     # parallel sequences for `track`
    precision_threshold: float = 20.0    # px, for metric summaries
    data: Optional[str] = None           # sequence or dataset directory
    out: Optional[str] = None            # output directory (track) or head file (train-scorer)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.precision_threshold < 0:
            raise ValueError("precision_threshold must be >= 0")
        self.tracker.seed = self.seed


# ---------------------------------------------------------------------------
# dict <-> dataclass
# ---------------------------------------------------------------------------

def _check_scalar(key: str, value, default):
    if value is None:
        if default is None:
            return None
        raise ConfigError(key, "null is not allowed here")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _check_tracker_seed(data: dict) -> None:
    tracker = data.get("tracker")
    if not isinstance(tracker, dict) or "seed" not in tracker:
        return
    seed = data.get("seed", RunConfig.seed)
    if tracker["seed"] != seed or isinstance(tracker["seed"], bool):
        raise ConfigError("tracker.seed", f"is copied from the top-level seed ({seed!r}); "
                                          f"set 'seed' instead of {tracker['seed']!r}")


def from_dict(cls, data: dict, prefix: str = ""):
    """Build dataclass cls from a JSON object, rejecting unknown or mistyped keys."""
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    if cls is RunConfig:
        _check_tracker_seed(data)
    defaults = cls()
    settable = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in settable:
            raise ConfigError(dotted, "unknown key")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_dict(type(default), value, dotted)
        else:
            kwargs[key] = _check_scalar(dotted, value, default)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(prefix, str(e))


def to_dict(obj) -> dict:
    """JSON-ready dict of a (nested) config dataclass, init fields only."""
    out = {}
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    try:
        return from_dict(RunConfig, data)
    except ConfigError as e:
        raise ConfigError(e.key, f"{e.detail} (in {path})")


def dump_config(config: RunConfig, path: Path = None) -> str:
    """Sorted, indented JSON of the config; also written to path when given."""
    text = json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def with_overrides(config: RunConfig, **flags) -> RunConfig:
    """Apply command-line flags (None means "not given") on top of config."""
    given = {k: v for k, v in flags.items() if v is not None}
    if not given:
        return config
    try:
        return dataclasses.replace(config, tracker=copy.deepcopy(config.tracker), **given)
    except ValueError as e:
        raise ConfigError(next(iter(given)), str(e))
