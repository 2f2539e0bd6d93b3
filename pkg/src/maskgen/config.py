"""
Run configuration: one flat namespace of keys with built-in defaults, an
optional key-value file and command-line overrides (flag > file > default).

The file is INI-style; section headers are optional grouping only::

    [train]
    phase1_steps = 400
    lr_phase1 = 5e-4
    [model]
    channel_multipliers = (1, 2, 4)

A ``resolved_config.json`` written by a previous run is also accepted.
"""

from __future__ import annotations

import ast
import configparser
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ConfigError
from .training import TrainConfig

SCHEDULE_DEFAULTS = {"T": 400, "beta_start": 1e-4, "beta_end": 0.02}
CONDITIONING_DEFAULTS = {"mask_grid": 16, "max_prompt_len": 16}
RUN_DEFAULTS = {
    "out_dir": "runs/default",
    "base_checkpoint": None,
    "checkpoint": None,
    "source_image": None,
    "source_masks": (),
    "prompt": "a photo of <asset0>",
    "masks": (),
    "gen_steps": None,
    "guidance": 1.0,
    "eval_seeds": 8,
    "eval_color": (220, 40, 40),
    "eval_threshold": 60.0,
    "target_mask": None,
    "ablation_seeds": 4,
    "corpus_preview": 16,
    "dump_attention": False,
}

_DENOISER_KEYS = [f.name for f in fields(DenoiserConfig)]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


def defaults() -> dict:
    d = dict(SCHEDULE_DEFAULTS)
    d.update(DenoiserConfig().to_dict())
    d.update(CONDITIONING_DEFAULTS)
    tc = TrainConfig()
    d.update({k: getattr(tc, k) for k in _TRAIN_KEYS})
    d.update(RUN_DEFAULTS)
    return d


def _coerce(key: str, value, default):
    """Convert ``value`` to the type implied by the default of ``key``."""
    try:
        if default is None and key != "gen_steps" and isinstance(value, str):
            return None if value.lower() in ("none", "null", "") else value
        if isinstance(value, str) and not isinstance(default, str):
            if value.lower() in ("none", "null"):
                value = None
            elif value.lower() in ("true", "false"):
                value = value.lower() == "true"
            else:
                try:
                    value = ast.literal_eval(value)
                except (ValueError, SyntaxError):
                    pass
        if value is None:
            if default is None or key in ("gen_steps",):
                return None
            raise ValueError("may not be empty")
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(f"expected true/false, got {value!r}")
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(f"expected a number, got {value!r}")
            return float(value)
        if isinstance(default, (tuple, list)):
            if isinstance(value, (str, int, float)):
                value = (value,)
            return tuple(value)
        if key == "gen_steps":
            return int(value)
        return value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {key}: {e}", key=key) from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found", key="config")
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
        return {k: (v["value"] if isinstance(v, dict) and "value" in v else v) for k, v in raw.items()}
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}", key="config") from None
    out = {}
    for section in parser.sections():
        for k, v in parser.items(section):
            if k in out:
                raise ConfigError(f"key {k} given twice", key=k)
            out[k] = v
    return out


@dataclass
class RunConfig:
    values: dict
    sources: dict

    @classmethod
    def build(cls, file_values: dict | None = None, cli_values: dict | None = None) -> "RunConfig":
        base = defaults()
        values, sources = dict(base), {k: "default" for k in base}
        for origin, layer in (("file", file_values or {}), ("cli", cli_values or {})):
            for k, v in layer.items():
                if k not in base:
                    raise ConfigError(f"unknown configuration key {k!r}", key=k)
                values[k] = _coerce(k, v, base[k])
                sources[k] = origin
        rc = cls(values, sources)
        rc.validate()
        return rc

    def __getitem__(self, key):
        return self.values[key]

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(**{k: self.values[k] for k in _DENOISER_KEYS})

    def train(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})

    def schedule(self) -> dict:
        return {k: self.values[k] for k in SCHEDULE_DEFAULTS}

    def validate(self):
        from .diffusion import build_schedule

        v = self.values
        try:
            build_schedule(v["T"], v["beta_start"], v["beta_end"])
        except ConfigError as e:
            raise ConfigError(str(e), key=e.key or "T") from None
        self.denoiser().validate()
        self.train().validate()
        if v["mask_grid"] < 1 or v["image_size"] % v["mask_grid"]:
            raise ConfigError("mask_grid must divide image_size", key="mask_grid")
        if v["max_prompt_len"] < 1:
            raise ConfigError("max_prompt_len must be >= 1", key="max_prompt_len")
        if v["gen_steps"] is not None and not 1 <= v["gen_steps"] <= v["T"]:
            raise ConfigError(f"gen_steps must be in [1, {v['T']}]", key="gen_steps")
        if v["guidance"] < 1.0:
            raise ConfigError("guidance must be >= 1", key="guidance")
        if v["eval_seeds"] < 1 or v["ablation_seeds"] < 1:
            raise ConfigError("seed counts must be >= 1", key="eval_seeds")
        if len(v["eval_color"]) != 3:
            raise ConfigError("eval_color must be an (r, g, b) triple", key="eval_color")
        return self

    def resolved(self) -> dict:
        return {k: {"value": _jsonable(self.values[k]), "source": self.sources[k]} for k in sorted(self.values)}

    def write_resolved(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.resolved(), f, indent=2, sort_keys=True)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v
