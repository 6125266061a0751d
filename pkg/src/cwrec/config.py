"""Flat ``key=value`` experiment configuration with dotted keys.

File syntax: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored. ``none`` clears an optional value. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from .backbones import BACKBONE_KINDS, BackboneConfig
from .errors import ConfigError
from .losses import ACTIVATIONS, LOSS_KINDS, SIGMA_FORMS, LossConfig
from .optim import OptimConfig, SamplerConfig, TrainSchedule
from .sampling import PRIOR_MODES

__all__ = ["ExperimentConfig", "KEYS", "parse_value"]


def _choice(options: Iterable[str]) -> Callable[[str], str]:
    lookup = {o.lower(): o for o in options}

    def conv(text: str) -> str:
        try:
            return lookup[text.strip().lower()]
        except KeyError:
            raise ValueError(f"{text!r} not in {sorted(lookup.values())}") from None

    return conv


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(text: str):
        return None if text.strip().lower() in ("none", "auto", "") else conv(text)

    return wrapped


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "data.path": (str, ""),
    "data.format": (_choice(["tsv", "csv"]), "tsv"),
    "data.k_core": (int, 10),
    "data.min_rating": (float, 3.0),
    "split.seed": (int, 0),
    "split.test_frac": (float, 0.2),
    "split.val_frac": (float, 0.1),
    "backbone.kind": (_choice(BACKBONE_KINDS), "MF"),
    "backbone.d": (int, 64),
    "backbone.layers": (_optional(int), None),
    "backbone.noise_eps": (float, 0.1),
    "backbone.contrast_layer": (int, 1),
    "backbone.contrast_temp": (float, 0.1),
    "backbone.contrast_weight": (float, 0.1),
    "backbone.init_scale": (_optional(float), None),
    "loss.kind": (_choice(LOSS_KINDS), "CW"),
    "loss.tau": (float, 0.2),
    "loss.tau2": (_optional(float), None),
    "loss.beta": (float, 0.8),
    "loss.activation": (_choice(ACTIVATIONS), "relu"),
    "loss.sigma_form": (_choice(SIGMA_FORMS), "raw_power"),
    "loss.eps_clamp": (float, 1e-8),
    "sampler.N": (int, 1000),
    "sampler.M": (int, 4),
    "prior.mode": (_choice(PRIOR_MODES), "constant"),
    "prior.constant": (_optional(float), 0.1),
    "optim.lr": (float, 1e-3),
    "optim.wd": (float, 0.0),
    "schedule.epochs": (int, 200),
    "schedule.batch_size": (int, 1024),
    "schedule.eval_every": (int, 1),
    "schedule.early_stop_patience": (_optional(int), None),
    "eval.K": (int, 20),
    "seed": (int, 0),
    "output.dir": (str, "runs/default"),
    "output.checkpoint_mode": (_choice(["text", "binary"]), "text"),
}


def parse_value(key: str, text: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    conv = KEYS[key][0]
    try:
        return conv(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    @classmethod
    def parse_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            cfg.values[key] = parse_value(key, val)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse_text(text)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """New config with values replaced; strings are parsed, others taken as-is."""
        vals = dict(self.values)
        for key, val in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = parse_value(key, val) if isinstance(val, str) else val
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in KEYS)

    def write(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    # typed views ---------------------------------------------------------

    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(kind=v["backbone.kind"], layers=v["backbone.layers"],
                              noise_eps=v["backbone.noise_eps"], contrast_layer=v["backbone.contrast_layer"],
                              contrast_temp=v["backbone.contrast_temp"],
                              contrast_weight=v["backbone.contrast_weight"], d=v["backbone.d"],
                              init_scale=v["backbone.init_scale"])

    def loss(self) -> LossConfig:
        v = self.values
        return LossConfig(kind=v["loss.kind"], tau=v["loss.tau"], tau2=v["loss.tau2"], beta=v["loss.beta"],
                          activation=v["loss.activation"], sigma_form=v["loss.sigma_form"],
                          eps_clamp=v["loss.eps_clamp"])

    def schedule(self) -> TrainSchedule:
        v = self.values
        return TrainSchedule(v["schedule.epochs"], v["schedule.batch_size"], v["schedule.eval_every"],
                             v["schedule.early_stop_patience"])

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.values["sampler.N"], self.values["sampler.M"])

    def optim(self) -> OptimConfig:
        return OptimConfig(self.values["optim.lr"], self.values["optim.wd"])

    def validate(self) -> None:
        """Raise :class:`ConfigError` when any typed view rejects the values."""
        v = self.values
        try:
            self.backbone()
            self.loss()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if v["sampler.N"] < 1 or v["sampler.M"] < 0:
            raise ConfigError("sampler.N must be >= 1 and sampler.M >= 0")
        if v["loss.kind"] in ("L_C", "CW") and v["sampler.M"] < 1:
            raise ConfigError("corrected losses need sampler.M >= 1")
        if v["prior.mode"] == "constant":
            c = v["prior.constant"]
            if c is None or not 0 <= c < 1:
                raise ConfigError("prior.constant must lie in [0, 1)")
        if not (0 <= v["split.test_frac"] < 1 and 0 <= v["split.val_frac"] < 1):
            raise ConfigError("split fractions must lie in [0, 1)")
        if v["data.k_core"] < 1 or v["eval.K"] < 1:
            raise ConfigError("data.k_core and eval.K must be >= 1")
        if v["optim.lr"] <= 0 or v["optim.wd"] < 0:
            raise ConfigError("optim.lr must be > 0 and optim.wd >= 0")
