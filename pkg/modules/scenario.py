from __future__ import annotations

import configparser
import re

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import aiofiles
import numpy as np

import config
from modules.errors import ConfigError
from modules.lindesign import PlantModel
from modules.polyapprox import ALPHAS, NonlinearModel
from modules.simloop import Mode, Scenario, TransportKind

BOOLEAN_STATES = configparser.ConfigParser.BOOLEAN_STATES


def _entries(text: str) -> list:
    return [entry for entry in re.split(r"[,\s]+", text.strip()) if entry]


def _vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in _entries(text)])


def _matrix(text: str) -> np.ndarray:
    rows = [[float(v) for v in _entries(row)] for row in text.split(";") if row.strip()]
    if not rows or len({len(row) for row in rows}) != 1:
        raise ValueError(f"ragged or empty matrix {text!r}")
    return np.array(rows)


def _pair(cast: Callable) -> Callable[[str], Tuple]:
    def parse(text: str) -> Tuple:
        values = [cast(v) for v in _entries(text)]
        if len(values) != 2:
            raise ValueError(f"expected two values, got {len(values)}")
        return tuple(values)

    return parse


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError(f"{value} is not positive")
    return value


def _boolean(text: str) -> bool:
    if text.lower() not in BOOLEAN_STATES:
        raise ValueError(f"{text!r} is not a boolean")
    return BOOLEAN_STATES[text.lower()]


def _auto_or_int(text: str):
    return "auto" if text.strip().lower() == "auto" else _positive_int(text)


def _enabled(table: Dict[str, bool], enum_type):
    def parse(text: str):
        value = enum_type(text.strip().lower())
        if not table.get(value.value, False):
            raise ValueError(f"{value.value} is disabled in config.py")
        return value

    return parse


def _alpha(text: str) -> str:
    name = text.strip().lower()
    if name not in ALPHAS:
        raise ValueError(f"unknown nonlinearity {name!r}, pick one of {', '.join(sorted(ALPHAS))}")
    return name


SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "scenario": {
        "mode": _enabled(config.MODES, Mode),
        "horizon": _positive_int,
        "seed": int,
        "transport": _enabled(config.TRANSPORTS, TransportKind),
        "x0": _vector,
    },
    "plant": {
        "A": _matrix,
        "B": _matrix,
        "a": float,
        "b": float,
    },
    "design": {
        "K": _matrix,
        "k": float,
        "q_sat": _auto_or_int,
        "epsilon": float,
        "safety_factor": float,
        "r_max": _positive_int,
        "key_bits": _auto_or_int,
        "key_primes": _pair(int),
        "Q": _matrix,
        "Q_bar": _matrix,
        "reblind_each_step": _boolean,
        "always_trigger": _boolean,
        "convergence_floor": float,
    },
    "nonlinear": {
        "alpha": _alpha,
        "domain": _pair(float),
        "target_eps": float,
        "max_degree": int,
        "delta0": float,
        "freeze_radius": float,
        "freeze_stage": int,
    },
    "output": {
        "trajectory": str,
        "metrics": str,
        "record_timing": _boolean,
    },
}

REQUIRED = {
    "linear": {("scenario", "x0"), ("plant", "A"), ("plant", "B"), ("design", "K")},
    "nonlinear": {
        ("scenario", "x0"),
        ("plant", "a"),
        ("plant", "b"),
        ("design", "k"),
        ("design", "q_sat"),
        ("nonlinear", "alpha"),
        ("nonlinear", "domain"),
    },
}
LINEAR_ONLY = {("plant", "A"), ("plant", "B"), ("design", "K"), ("design", "Q"), ("design", "Q_bar")}
NONLINEAR_ONLY = {("plant", "a"), ("plant", "b"), ("design", "k")}

# keys handed to Scenario unchanged
DESIGN_FIELDS = (
    "q_sat",
    "epsilon",
    "safety_factor",
    "r_max",
    "key_bits",
    "key_primes",
    "Q",
    "Q_bar",
    "reblind_each_step",
    "always_trigger",
    "convergence_floor",
)
NONLINEAR_FIELDS = ("target_eps", "max_degree", "delta0", "freeze_radius", "freeze_stage")


@dataclass(frozen=True)
class RunConfig:
    """
    A parsed scenario document.

    Attributes
    ----------------
    scenario: :class:`Scenario`
        The run.
    trajectory_path, metrics_path: Optional[:class:`str`]
        Where ``run`` and ``plant`` write their outputs.
    record_timing: :class:`bool`
        Fill the ``crypto_ms`` column.
    """

    scenario: Scenario
    trajectory_path: Optional[str] = None
    metrics_path: Optional[str] = None
    record_timing: bool = False


def _validate(parser: configparser.ConfigParser) -> Dict[Tuple[str, str], Any]:
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"Unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"Unknown key {key!r} in [{section}]")
            try:
                values[(section, key)] = SCHEMA[section][key](raw)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None

    if ("scenario", "mode") not in values:
        raise ConfigError("[scenario] mode is required")

    nonlinear = values[("scenario", "mode")] is Mode.NONLINEAR
    missing = REQUIRED["nonlinear" if nonlinear else "linear"] - values.keys()
    if missing:
        raise ConfigError("Missing " + ", ".join(f"[{s}] {k}" for s, k in sorted(missing)))

    stray = values.keys() & (LINEAR_ONLY if nonlinear else NONLINEAR_ONLY)
    if not nonlinear:
        stray |= {key for key in values if key[0] == "nonlinear"}
    if stray:
        raise ConfigError("Not used in this mode: " + ", ".join(f"[{s}] {k}" for s, k in sorted(stray)))

    return values


def parse_run_config(text: str) -> RunConfig:
    """
    Parse and validate a scenario document.

    Raises
    ------
    :class:`ConfigError`
        On syntax errors, unknown sections or keys, malformed values, missing keys,
        or values the scenario itself rejects.
    """
    parser = configparser.ConfigParser(interpolation=None)
    # keys are case sensitive, A and a are different plants
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed scenario document: {e}") from None

    values = _validate(parser)
    mode = values[("scenario", "mode")]

    kwargs = {key: values[("design", key)] for key in DESIGN_FIELDS if ("design", key) in values}
    kwargs.update({key: values[("scenario", key)] for key in ("horizon", "seed", "transport") if ("scenario", key) in values})

    try:
        if mode is Mode.NONLINEAR:
            kwargs.update({key: values[("nonlinear", key)] for key in NONLINEAR_FIELDS if ("nonlinear", key) in values})
            plant = NonlinearModel(
                a=values[("plant", "a")],
                b=values[("plant", "b")],
                alpha=ALPHAS[values[("nonlinear", "alpha")]],
                domain=values[("nonlinear", "domain")],
                k=values[("design", "k")],
            )
        else:
            plant = PlantModel(values[("plant", "A")], values[("plant", "B")])
            kwargs["K"] = values[("design", "K")]

        scenario = Scenario(mode=mode, plant=plant, x0=values[("scenario", "x0")], **kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    return RunConfig(
        scenario=scenario,
        trajectory_path=values.get(("output", "trajectory")),
        metrics_path=values.get(("output", "metrics")),
        record_timing=values.get(("output", "record_timing"), False),
    )


async def load_run_config(path: str) -> RunConfig:
    try:
        async with aiofiles.open(path, "r") as f:
            text = await f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from None

    return parse_run_config(text)
