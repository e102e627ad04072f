"""Run configuration: nested JSON sections with defaults and strict key checking."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .akf import default_process_cov
from .datagen import DESK_GRID_AXIS, TRAIN_GRID_AXIS, SweepConfig, grid_pairs
from .errors import ConfigurationError
from .lstm.train import TrainConfig
from .model import ModelParams

GRIDS = {"desk": DESK_GRID_AXIS, "full": TRAIN_GRID_AXIS}

_SWEEP_KEYS = ("u_start", "u_growth", "u_floor", "u_ceiling", "max_failures", "segment_len", "record_len",
               "transient", "alpha", "lags", "max_redraws")


def _defaults():
    sweep = SweepConfig(tau_grid=[])
    return {
        "seed": 0,
        "model": ModelParams().to_dict(),
        "simulate": {"duration": 10.0, "transient": 1.0, "n_recordings": 1},
        "datagen": {"grid": "desk", "inputs_per_pair": 4, "windows_per_recording": None, "workers": 1,
                    **{k: getattr(sweep, k) for k in _SWEEP_KEYS}},
        "train": TrainConfig().to_dict(),
        "akf": {"mode": "fixed", "q_state": 1e-3, "q_param": 1e-5, "R": None},
        "ingest": {"format": None, "channel": None, "sample_rate": None},
        "infer": {"scaling": "recording", "stability_window": 10.0},
        "eval": {"inputs_per_pair": 4, "duration": 5.0, "noise_fractions": [0.0, 0.1],
                 "methods": ["lstm", "akf-perfect", "akf-fixed"], "scaling": "dataset"},
        "scenario": {"n_segments": 3, "hold": 5.0, "ramp": 5.0},
    }


DEFAULTS = _defaults()
# keys that accept more than one type
_FREE_KEYS = {("datagen", "grid")}


def _coerce(section, key, value, default):
    """Cast ``value`` to the type of ``default`` where that is unambiguous."""
    if value is None or default is None or (section, key) in _FREE_KEYS:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{section}.{key} must be true or false")
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{section}.{key} must be a number, got {value!r}")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigurationError(f"{section}.{key} must be a list")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{section}.{key} must be a string")
    return value


class RunConfig:
    """Defaults merged with a user file and ``section.key=value`` overrides.

    Unknown sections or keys raise :class:`ConfigurationError`.
    """

    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self.merge(data)

    def merge(self, data: dict):
        for section, value in data.items():
            if section not in self.data:
                raise ConfigurationError(f"unknown config section {section!r}")
            if not isinstance(self.data[section], dict):
                self.data[section] = _coerce("", section, value, DEFAULTS[section])
                continue
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {section!r} must be a mapping")
            for key, v in value.items():
                if key not in self.data[section]:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                self.data[section][key] = _coerce(section, key, v, DEFAULTS[section][key])
        return self

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls()
        if path is not None:
            try:
                cfg.merge(json.loads(Path(path).read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
            except FileNotFoundError as exc:
                raise ConfigurationError(f"config file {path} not found") from exc
        for item in overrides:
            cfg.set(item)
        return cfg

    def set(self, assignment: str):
        """Apply ``section.key=value``; the value is parsed as JSON when possible."""
        lhs, sep, rhs = assignment.partition("=")
        if not sep:
            raise ConfigurationError(f"override {assignment!r} is not of the form section.key=value")
        try:
            value = json.loads(rhs)
        except json.JSONDecodeError:
            value = rhs
        section, _, key = lhs.strip().partition(".")
        self.merge({section: {key: value}} if key else {section: value})

    def __getitem__(self, section):
        return self.data[section]

    @property
    def seed(self):
        return int(self.data["seed"])

    def to_dict(self):
        return copy.deepcopy(self.data)

    def write(self, directory, seeds=None):
        """Persist the resolved configuration (and the seeds used) next to the outputs."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "resolved_config.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        (d / "seeds.json").write_text(json.dumps({"master_seed": self.seed, **(seeds or {})}, indent=2,
                                                 sort_keys=True) + "\n")

    # ---- typed views

    def model_params(self, **changes) -> ModelParams:
        return ModelParams.from_dict({**self.data["model"], **changes})

    def sweep_config(self) -> SweepConfig:
        dg = self.data["datagen"]
        grid = dg["grid"]
        if isinstance(grid, str):
            if grid not in GRIDS:
                raise ConfigurationError(f"datagen.grid must be one of {sorted(GRIDS)} or a list of values")
            axis = GRIDS[grid]
        else:
            axis = [float(v) for v in grid]
        return SweepConfig(tau_grid=grid_pairs(axis), seed=self.seed, base=self.model_params(),
                           **{k: dg[k] for k in _SWEEP_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.data["train"])

    def process_cov(self):
        return default_process_cov(self.data["akf"]["q_state"], self.data["akf"]["q_param"])
