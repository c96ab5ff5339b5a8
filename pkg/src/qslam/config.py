"""INI configuration with a typed schema derived from the module dataclasses.

Every key has a default; files and ``section.key=value`` overrides may only
set known keys. The effective configuration is echoed into reports via
:meth:`Config.to_dict`.
"""

from __future__ import annotations

import configparser
import dataclasses
from typing import Iterable, Optional

from .errors import InvalidInputError
from .optim import TrainConfig
from .quadric import GateConfig
from .rectify import RectifyConfig
from .render import LossConfig
from .sampling import SampleConfig
from .synth import NoiseModel
from .transformer import TransformerConfig


class ConfigError(InvalidInputError):
    """Unknown section/key or a value of the wrong type."""


def _defaults(cls, skip=("seed",)) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)
            if f.name not in skip and f.default is not dataclasses.MISSING}


SCHEMA: dict[str, dict] = {
    "synth": {"scene": "default", "size": 64, "n_frames": 5,
              **_defaults(NoiseModel), "depth_sigma": 0.02,
              "pose_rot_sigma": 1.0, "pose_trans_sigma": 0.01},
    "fit": {**_defaults(GateConfig), "min_points": RectifyConfig.min_points, "refine": True},
    "rectify": {"mode": RectifyConfig.mode, "max_rel_change": RectifyConfig.max_rel_change},
    "sample": _defaults(SampleConfig),
    "model": _defaults(TransformerConfig, skip=("seed", "d_far")),
    "train": {**_defaults(TrainConfig), **_defaults(LossConfig), "tau_flow": 4.0},
    "fuse": {"voxel_size": 0.01, "truncation": 0.0, "max_jump_factor": 2.5},
    "eval": {"align_mode": "se3", "n_samples": 100_000, "threshold": 0.05, "gt_upsample": 4},
}

CHOICES = {
    ("rectify", "mode"): ("fixed-xy", "ray"),
    ("eval", "align_mode"): ("se3", "sim3"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


class Config:
    def __init__(self, values: Optional[dict] = None, seed: int = 0):
        self.values = {s: dict(keys) for s, keys in SCHEMA.items()}
        self.seed = int(seed)
        for section, keys in (values or {}).items():
            for key, val in keys.items():
                self.set(section, key, val)

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]; known: {', '.join(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(SCHEMA[section])}")
        default = SCHEMA[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(section, key, value, default)
        elif isinstance(default, bool) != isinstance(value, bool) or \
                (isinstance(default, (int, float)) and not isinstance(value, (int, float))):
            raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
        elif isinstance(default, float):
            value = float(value)
        allowed = CHOICES.get((section, key))
        if allowed and value not in allowed:
            raise ConfigError(f"[{section}] {key}: expected one of {', '.join(allowed)}, got {value!r}")
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keys are case sensitive
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = cls(seed=seed)
        for section in parser.sections():
            for key, raw in parser.items(section):
                try:
                    cfg.set(section, key, raw)
                except ConfigError as exc:
                    raise ConfigError(f"{path}: {exc}") from None
        return cfg

    def apply_overrides(self, items: Iterable[str]) -> "Config":
        for item in items:
            name, sep, raw = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            self.set(section, key, raw)
        return self

    def validate(self) -> "Config":
        """Build every module config once so range errors surface as ConfigError."""
        try:
            self.noise_model()
            self.rectify_config()
            self.sample_config()
            self.transformer_config()
            self.train_config()
            self.loss_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{s: dict(sorted(k.items())) for s, k in sorted(self.values.items())}}

    def write(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for s, keys in self.values.items():
            parser[s] = {k: str(v) for k, v in keys.items()}
        with open(path, "w") as fh:
            parser.write(fh)

    # -- builders ---------------------------------------------------------

    def noise_model(self) -> NoiseModel:
        s = self["synth"]
        return NoiseModel(s["depth_sigma"], s["edge_blur_px"], s["pose_rot_sigma"], s["pose_trans_sigma"],
                          seed=self.seed)

    def gate_config(self) -> GateConfig:
        f = self["fit"]
        return GateConfig(f["area_min"], f["tau_eps"], f["r2_min"])

    def rectify_config(self) -> RectifyConfig:
        f, r = self["fit"], self["rectify"]
        return RectifyConfig(self.gate_config(), r["mode"], r["max_rel_change"], f["min_points"], f["refine"])

    def sample_config(self) -> SampleConfig:
        return SampleConfig(**self["sample"], seed=self.seed)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(**self["model"], d_far=self["sample"]["d_far"], seed=self.seed)

    def train_config(self) -> TrainConfig:
        keys = _defaults(TrainConfig)
        return TrainConfig(**{k: self["train"][k] for k in keys}, seed=self.seed)

    def loss_config(self) -> LossConfig:
        return LossConfig(**{k: self["train"][k] for k in _defaults(LossConfig)})
