"""Flat ``key = value`` run configuration with one ``[section]`` per command.

Every section is checked against a schema before any work starts: unknown
sections and keys are rejected, values are type-converted, and missing
required keys are reported by name.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable

REQUIRED = object()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = REQUIRED
    choices: tuple | None = None
    help: str = ""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    s = s.strip()
    return tuple(int(x) for x in s.split(",")) if s else ()


def _finite(s: str) -> float:
    x = float(s)
    if not math.isfinite(x):
        raise ValueError(f"not a finite number: {s!r}")
    return x


MODELS = ("rkn", "acrkn", "hiprssm", "mts3")
ENVS = ("pendulum", "hip_variant", "two_timescale")

SCHEMA: dict[str, dict[str, Key]] = {
    "generate": {
        "env": Key(str, choices=ENVS),
        "T": Key(int, 300),
        "n_train": Key(int, 32),
        "n_test": Key(int, 16),
        "seed": Key(int, 0),
        "dt": Key(_finite, 0.05),
        "mass": Key(_finite, 1.0),
        "length": Key(_finite, 1.0),
        "damping": Key(_finite, 0.5),
        "gravity": Key(_finite, 9.81),
        "torque_amp": Key(_finite, 4.0),
        "obs_noise": Key(_finite, 0.01),
        "N": Key(int, 25, help="segment length of the hip_variant mass draws"),
        "H": Key(int, 0, help="two_timescale window length; 0 picks H*dt = 0.3 s"),
        "period_steps": Key(int, 0, help="two_timescale drift period; 0 means 20 H"),
        "amplitude": Key(_finite, 0.8),
        "out": Key(str, "data"),
    },
    "train": {
        "model": Key(str, choices=MODELS),
        "train_data": Key(str),
        "d": Key(int, 15),
        "K": Key(int, 1),
        "bandwidth": Key(int, 3),
        "control": Key(str, "nonlinear", ("linear", "locally_linear", "nonlinear")),
        "hidden": Key(int, 30),
        "H": Key(int, 0, help="MTS3 window length; 0 picks H*dt = 0.3 s"),
        "task_dim": Key(int, 15),
        "task_kind": Key(str, "linear", ("linear", "locally_linear", "nonlinear")),
        "N": Key(int, 25, help="HiP-RSSM window length"),
        "hip_data": Key(str, "episode", ("episode", "windows")),
        "loss": Key(str, "gaussian_nll", ("gaussian_nll", "rmse_differences")),
        "mask_step": Key(_finite, 0.0),
        "mask_window": Key(_finite, 0.5),
        "lr": Key(_finite, 1e-3),
        "epochs": Key(int, 25),
        "batch_size": Key(int, 16),
        "tbptt": Key(int, 0),
        "clip_norm": Key(_finite, 5.0),
        "val_fraction": Key(_finite, 0.1),
        "seed": Key(int, 0),
        "resume": Key(str, ""),
        "out": Key(str, "runs/train"),
    },
    "eval": {
        "model": Key(str, choices=MODELS),
        "checkpoint": Key(str, help="may contain {H} when H_sweep is set"),
        "test_data": Key(str),
        "context_len": Key(int, 0, help="0 means 2/3 of the sequence"),
        "horizon": Key(int, 0, help="0 means the rest of the sequence"),
        "W": Key(int, 0, help="sliding window; 0 means the model's H"),
        "H_sweep": Key(_ints, (), help="comma-separated H values, one final-step row each"),
        "hip_data": Key(str, "episode", ("episode", "windows")),
        "deltas": Key(_bool, False),
        "predictions": Key(_bool, True),
        "seed": Key(int, 0),
        "out": Key(str, "runs/eval"),
    },
}


def parse_text(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: value}}``; no schema applied yet."""
    sections: dict[str, dict[str, str]] = {}
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"{source}:{n}: duplicate section [{current}]")
            sections[current] = {}
            continue
        key, sep, value = line.partition("=")
        # inline comments need whitespace before the '#'
        key, value = key.strip(), re.split(r"\s#", value, maxsplit=1)[0].strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected key = value")
        if current is None:
            raise ConfigError(f"{source}:{n}: key {key!r} outside any [section]")
        if key in sections[current]:
            raise ConfigError(f"{source}:{n}: duplicate key {current}.{key}")
        sections[current][key] = value
    return sections


def _convert(section: str, key: str, spec: Key, value: str):
    try:
        v = spec.parse(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    if spec.choices is not None and v not in spec.choices:
        raise ConfigError(f"bad value for {section}.{key}: {v!r} not in {', '.join(spec.choices)}")
    return v


def resolve(sections: dict[str, dict[str, str]], command: str, overrides: dict | None = None) -> dict[str, Any]:
    """Validate every section, then return the fully-defaulted settings of ``command``."""
    for name, body in sections.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        for key, value in body.items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {name}.{key}")
            _convert(name, key, SCHEMA[name][key], value)
    body = sections.get(command, {})
    out = {}
    for key, spec in SCHEMA[command].items():
        if overrides and overrides.get(key) is not None:
            out[key] = overrides[key]
        elif key in body:
            out[key] = _convert(command, key, spec, body[key])
        elif spec.default is REQUIRED:
            raise ConfigError(f"missing required key {command}.{key}")
        else:
            out[key] = spec.default
    return out


def load(path, command: str, overrides: dict | None = None) -> dict[str, Any]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return resolve(parse_text(text, str(path)), command, overrides)


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump(command: str, cfg: dict[str, Any]) -> str:
    lines = [f"[{command}]"] + [f"{k} = {_show(cfg[k])}" for k in SCHEMA[command]]
    return "\n".join(lines) + "\n"


def default_window(dt: float, seconds: float = 0.3) -> int:
    """Steps per slow-scale window so that ``H * dt`` is about ``seconds``."""
    return max(1, round(seconds / dt))


def window_ladder(T: int, levels: int) -> list[int]:
    """Rule-of-thumb window lengths ``H_i = T ** (i / levels)`` for ``i = 1 .. levels - 1``."""
    if levels < 2 or T < 1:
        raise ValueError("need levels >= 2 and T >= 1")
    return [max(1, round(T ** (i / levels))) for i in range(1, levels)]
