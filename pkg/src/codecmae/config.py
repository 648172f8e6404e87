"""Run configuration: one TOML file per run, with ``section.key=value`` overrides.

Sections and keys (all optional, defaults in brackets)::

    seed = 0

    [audio]      sample_rate [24000], crop_s [4.0], chunk_s [4.0]
    [frontend]   n_mels [128]
    [rvq]        n_books [8], size [64], max_frames [30000], gamma_sample [150]
    [masking]    proportion [0.5], span [15]
    [model]      preset ["desk"] plus any ModelConfig field
                 (dim, enc_layers, dec_layers, heads, ff_mult, max_len)
    [loss]       delta [0.9]
    [trainer]    any TrainConfig field (lr, weight_decay, beta1, beta2, eps,
                 batch_size, steps_stage1, steps_stage2, eval_every,
                 eval_items, grad_clip, cache_items)
    [selftrain]  k [64], sample_size [200]
    [synth]      any SynthSpec field (generator, n_items, n_classes, ...)
    [probe]      data_dir, task ["task"], metric ["accuracy"],
                 val_fraction [0.2], test_fraction [0.2], bootstrap_iters [100],
                 linear [false], grid {hidden, lr, dropout},
                 norm_stats {<task> = {mean, std}}
    [paths]      corpus_dir, tokenizer, checkpoint
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .audio_io import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .objective import LossConfig
from .trainer import MaskConfig, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "audio": {"sample_rate": 24000, "crop_s": 4.0, "chunk_s": 4.0},
    "frontend": {"n_mels": 128},
    "rvq": {"n_books": 8, "size": 64, "max_frames": 30000, "gamma_sample": 150},
    "masking": {"proportion": 0.5, "span": 15},
    "model": {"preset": "desk"},
    "loss": {"delta": 0.9},
    "trainer": {},
    "selftrain": {"k": 64, "sample_size": 200},
    "synth": {},
    "probe": {
        "data_dir": None,
        "task": "task",
        "metric": "accuracy",
        "val_fraction": 0.2,
        "test_fraction": 0.2,
        "bootstrap_iters": 100,
        "linear": False,
        "grid": {},
        "norm_stats": {},
    },
    "paths": {"corpus_dir": None, "tokenizer": None, "checkpoint": None},
}

_TYPED = {"model": ModelConfig, "trainer": TrainConfig, "synth": SynthSpec}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        name = f"{where}{key}"
        if isinstance(out.get(key), dict) and isinstance(value, dict):
            open_ended = key in ("grid", "norm_stats")
            out[key] = {**out[key], **value} if open_ended else _merge(out[key], value, name + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(value.strip())


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Path | None = None

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} does not exist")
            try:
                raw = tomllib.loads(path.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            apply_override(raw, item)
        if seed is not None:
            raw["seed"] = seed
        cfg = cls(_merge(DEFAULTS, raw), path)
        cfg.validate()
        return cfg

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def resolve(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def validate(self) -> None:
        for name in self.data:
            if name not in DEFAULTS:
                raise ConfigError(f"unknown config section {name!r}")
        for name, section in self.data.items():
            if name in _TYPED or not isinstance(section, dict):
                continue
            for key in section:
                if key not in DEFAULTS[name]:
                    raise ConfigError(f"unknown config field {name}.{key}")
        for name, cls in _TYPED.items():
            allowed = {f.name for f in fields(cls)} | ({"preset"} if name == "model" else set())
            for key in self.data[name]:
                if key not in allowed:
                    raise ConfigError(f"unknown config field {name}.{key}")
        # build every typed config once so numeric constraints are checked up front
        self.model_config()
        self.train_config()
        self.mask_config()
        self.loss_config()
        self.synth_spec()
        if self.section("frontend")["n_mels"] < 1:
            raise ConfigError("frontend.n_mels must be >= 1")
        if self.section("rvq")["size"] < 2 or self.section("rvq")["n_books"] < 1:
            raise ConfigError("rvq.size must be >= 2 and rvq.n_books >= 1")
        if self.section("selftrain")["k"] < 2:
            raise ConfigError("selftrain.k must be >= 2")
        for key in ("crop_s", "chunk_s"):
            if not self.section("audio")[key] > 0:
                raise ConfigError(f"audio.{key} must be positive")

    def _build(self, cls, section: str, **fixed):
        kwargs = {k: v for k, v in self.data[section].items() if k != "preset"}
        kwargs.update(fixed)
        try:
            if cls is ModelConfig:
                return ModelConfig.preset(self.data["model"].get("preset", "desk"), **kwargs)
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc

    def model_config(self) -> ModelConfig:
        return self._build(
            ModelConfig, "model",
            input_dim=self.section("frontend")["n_mels"],
            n_books=self.section("rvq")["n_books"],
            n_classes=self.section("rvq")["size"],
        )

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, "trainer", seed=self.seed, crop_s=self.section("audio")["crop_s"])

    def mask_config(self) -> MaskConfig:
        m = self.section("masking")
        if not 0 < m["proportion"] < 1 or m["span"] < 1:
            raise ConfigError("masking.proportion must be in (0, 1) and masking.span >= 1")
        return MaskConfig(float(m["proportion"]), int(m["span"]))

    def loss_config(self, gamma=None) -> LossConfig:
        try:
            return LossConfig(float(self.section("loss")["delta"]), gamma)
        except ConfigError as exc:
            raise ConfigError(f"[loss] {exc}") from exc

    def synth_spec(self) -> SynthSpec:
        s = dict(self.data["synth"])
        for key in ("gain_range", "snr_db"):
            if isinstance(s.get(key), list):
                s[key] = tuple(s[key])
        s.setdefault("sample_rate", self.section("audio")["sample_rate"])
        try:
            return SynthSpec(**s)
        except TypeError as exc:
            raise ConfigError(f"[synth] {exc}") from exc

    def require_path(self, key: str, override=None, must_exist: bool = True) -> Path:
        value = override if override is not None else self.section("paths").get(key)
        if value is None:
            raise ConfigError(f"paths.{key} is not set")
        p = Path(value) if override is not None else self.resolve(value)
        if must_exist and not p.exists():
            raise ConfigError(f"paths.{key}: {p} does not exist")
        return p
