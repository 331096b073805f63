"""Run configuration files.

An INI file with up to five sections; every key is optional and unknown
keys are errors. Values are parsed as JSON when possible (numbers, lists,
true/false/null), otherwise kept as strings.

[data]     preset, dims, spacing, num_volumes, num_validation, fg_fraction, seed, ...
[model]    any DualPathConfig field (rank, num_classes, high_blocks, low_blocks, ...)
[train]    preset, then any TrainConfig field except the sampler ones
[sampler]  mode, epsilon, max_attempts, refresh_subset
[augment]  target_spacing, jitter, rotation, enable_jitter, enable_rotation
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .dualpath import DualPathConfig
from .synthetic import ForegroundClass, SyntheticConfig, preset
from .trainer import TrainConfig, train_preset

SECTIONS = ("data", "model", "train", "sampler", "augment")
SAMPLER_KEYS = {"mode": "sampler", "epsilon": "epsilon", "max_attempts": "max_attempts",
                "refresh_subset": "refresh_subset"}


class ConfigError(ValueError):
    pass


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    model: DualPathConfig = field(default_factory=DualPathConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train_preset: str | None = None

    def synthetic(self) -> SyntheticConfig:
        """Dataset config from the [data] section (preset kidney2d unless named)."""
        d = dict(self.data)
        name = d.pop("preset", "kidney2d")
        fg = d.pop("fg_fraction", None)
        cfg = preset(name, **d)
        if fg is not None:
            fracs = fg if isinstance(fg, list) else [fg] * len(cfg.classes)
            if len(fracs) != len(cfg.classes):
                raise ConfigError(f"fg_fraction lists {len(fracs)} values for {len(cfg.classes)} classes")
            cfg.classes = [ForegroundClass(c.name, float(f), c.blobs, c.intensity) for c, f in zip(cfg.classes, fracs)]
        return cfg

    def to_ini(self) -> str:
        """Resolved config echo; loading it back gives an equal RunConfig."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = {k: json.dumps(v) for k, v in self.data.items()}
        cp["model"] = {k: json.dumps(v) for k, v in self.model.to_dict().items()}
        tr = self.train.to_dict()
        cp["sampler"] = {k: json.dumps(tr.pop(v)) for k, v in SAMPLER_KEYS.items()}
        cp["train"] = {k: json.dumps(v) for k, v in tr.items()}
        cp["augment"] = {k: json.dumps(v) for k, v in dataclasses.asdict(self.augment).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case sensitive
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
    sec = {s: {k: _value(v) for k, v in cp[s].items()} if cp.has_section(s) else {} for s in SECTIONS}

    data_keys = _fields(SyntheticConfig) | {"preset", "fg_fraction"}
    _check(sec["data"], data_keys, "data", source)
    _check(sec["model"], _fields(DualPathConfig), "model", source)
    train_keys = (_fields(TrainConfig) - set(SAMPLER_KEYS.values())) | {"preset"}
    _check(sec["train"], train_keys, "train", source)
    _check(sec["sampler"], set(SAMPLER_KEYS), "sampler", source)
    _check(sec["augment"], _fields(AugmentConfig), "augment", source)

    tr = dict(sec["train"])
    name = tr.pop("preset", None)
    tr.update({SAMPLER_KEYS[k]: v for k, v in sec["sampler"].items()})
    try:
        train = train_preset(name, **tr) if name else TrainConfig(**tr)
        model = DualPathConfig(**sec["model"])
        aug = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in sec["augment"].items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return RunConfig(sec["data"], model, train, aug, name)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def _check(values: dict, allowed: set[str], section: str, source: str) -> None:
    for key in values:
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
