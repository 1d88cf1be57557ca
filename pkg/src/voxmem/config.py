"""Pipeline configuration: a sectioned ``key = value`` text file.

Every key has a desk-scale default; keys that also have a full-scale reference value
list it in ``FULL_SCALE_DEFAULTS``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .synth import CorpusConfig

SECTIONS = {
    "data": ("n_train", "n_test", "n_prototypes", "r_v", "r_i", "data_seed", "delta_data",
             "test_occlusion", "test_clutter", "train_occlusion_max", "train_clutter_max"),
    "model": ("n_k", "n_e", "n_h", "encoder_hidden", "decoder_hidden", "fusion", "sequence_order",
              "model_seed"),
    "memory": ("memory_enabled", "capacity", "read_threshold", "write_threshold", "write_keys"),
    "train": ("epochs", "batch_size", "lr", "lr_decay_epoch", "beta1", "beta2", "adam_eps",
              "margin", "triplet_enabled", "augment", "train_seed", "check_invariants"),
    "eval": ("iou_threshold", "iso_level", "n_points", "fscore_d", "eval_seed"),
}

# key -> full-scale reference value, where one exists
FULL_SCALE_DEFAULTS = {
    "r_v": 32, "n_h": 2048, "capacity": 4000, "read_threshold": 0.85, "write_threshold": 0.90,
    "batch_size": 32, "lr": 0.001, "lr_decay_epoch": 150, "beta1": 0.9, "beta2": 0.999,
    "margin": 0.1, "iou_threshold": 0.3, "n_points": 8192, "fscore_d": (0.01,),
}


@dataclass
class PipelineConfig:
    # data
    n_train: int = 500
    n_test: int = 100
    n_prototypes: int = 160
    r_v: int = 16
    r_i: int = 32
    data_seed: int = 7
    delta_data: float = 0.90
    test_occlusion: float = 0.5
    test_clutter: float = 0.25
    train_occlusion_max: float = 0.5
    train_clutter_max: float = 0.25
    # model
    n_k: int = 128
    n_e: int = 64
    n_h: int = 128
    encoder_hidden: int = 256
    decoder_hidden: int = 512
    fusion: str = "lstm"
    sequence_order: str = "ascending"
    model_seed: int = 0
    # memory
    memory_enabled: bool = True
    capacity: int = 256
    read_threshold: float = 0.85
    write_threshold: float = 0.90
    write_keys: str = "forward"
    # train
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.001
    lr_decay_epoch: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    margin: float = 0.1
    triplet_enabled: bool = True
    augment: bool = True  # fresh train-split corruption every epoch after the first
    train_seed: int = 0
    check_invariants: bool = True
    # eval
    iou_threshold: float = 0.3
    iso_level: float = 0.3
    n_points: int = 8192
    fscore_d: tuple = (0.01, 0.03)
    eval_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("read_threshold", "write_threshold", "iou_threshold", "iso_level", "delta_data"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("n_train", "n_test", "n_prototypes", "r_v", "r_i", "n_k", "n_e", "n_h",
                     "encoder_hidden", "decoder_hidden", "capacity", "epochs", "batch_size",
                     "lr_decay_epoch", "n_points"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion not in ("lstm", "average", "top1"):
            raise ConfigError(f"fusion must be lstm, average or top1, got {self.fusion!r}")
        if self.sequence_order not in ("ascending", "descending"):
            raise ConfigError(f"sequence_order must be ascending or descending, got {self.sequence_order!r}")
        if self.write_keys not in ("forward", "refreshed"):
            raise ConfigError(f"write_keys must be forward or refreshed, got {self.write_keys!r}")
        if self.lr <= 0 or self.margin < 0:
            raise ConfigError("lr must be positive and margin non-negative")
        if not self.fscore_d or any(d <= 0 for d in self.fscore_d):
            raise ConfigError("fscore_d must be a non-empty list of positive distances")

    @property
    def image_dim(self):
        return 3 * self.r_i * self.r_i

    def corpus_config(self):
        return CorpusConfig(n_train=self.n_train, n_test=self.n_test, n_prototypes=self.n_prototypes,
                            r_v=self.r_v, r_i=self.r_i, seed=self.data_seed, delta=self.delta_data,
                            test_occlusion=self.test_occlusion, test_clutter=self.test_clutter,
                            train_occlusion_max=self.train_occlusion_max,
                            train_clutter_max=self.train_clutter_max)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings (from the command line)."""
        changes = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = (s.strip() for s in pair.split("=", 1))
            changes[key] = _parse(key, raw)
        return self.replace(**changes)

    def to_text(self):
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format(getattr(self, key))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


_TYPES = {f.name: f for f in fields(PipelineConfig)}


def _parse(key, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _TYPES[key].default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)


def load_config(path, overrides=()):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse(key, raw)
    return PipelineConfig(**values).with_overrides(overrides)
