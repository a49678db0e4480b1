"""Flat ``section.key=value`` run configuration, resolved before any compute.

Every module config is exposed under its own namespace (``encoder.``,
``regional.``, ``decoder.``, ``train.``, ``augment.``, ``decode.``) next to
the run plumbing (``data.``, ``eval.``, ``ablate.``, ``run.``). A resolved
config round-trips through :func:`dump` and :func:`load_file`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .beam import DecodeConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .imaging import AugmentConfig
from .model import ModelConfig
from .regional import RegionalConfig
from .train import TrainConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "regional": RegionalConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "decode": DecodeConfig,
}

# Taken from the vocabulary at run time.
DERIVED = {"decode.bos_id", "decode.eos_id", "decode.pad_id", "decoder.vocab_size"}

PLUMBING = {
    "data.manifest": "",
    "data.vocab": "",
    "data.split_ratios": (0.8, 0.1, 0.1),
    "data.split_seed": 42,
    "eval.checkpoint": "",
    "eval.compare": (),
    "eval.pairs": "",
    "eval.embeddings": "",
    "eval.synonyms": "",
    "eval.test": "randomization",
    "eval.iters": 10000,
    "ablate.arms": ("reweight:8", "off:8"),
    "ablate.k_sweep": (),
    "run.split": "test",
    "run.alpha_snapshots": 4,
}


def _defaults() -> dict:
    out = {}
    for section, cls in SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            if key not in DERIVED:
                out[key] = getattr(inst, f.name)
    out.update(PLUMBING)
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            conv = type(default[0]) if default else str
            return tuple(conv(t) for t in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    out_dir: str = "runs/default"

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        dec = self.section("decoder")
        if vocab_size is not None:
            dec["vocab_size"] = vocab_size
        return ModelConfig(EncoderConfig(**self.section("encoder")), RegionalConfig(**self.section("regional")),
                           DecoderConfig(**dec))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.section("augment"))

    def decode_config(self, vocab) -> DecodeConfig:
        return DecodeConfig(**self.section("decode"), bos_id=vocab.bos_id, eos_id=vocab.eos_id, pad_id=vocab.pad_id)

    def dump(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in sorted(self.values.items()))

    def write(self, name: str = "config.resolved") -> Path:
        path = Path(self.out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")
        return path


def resolve(config_path=None, overrides=(), out_dir: str | None = None, seed: int | None = None) -> RunConfig:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``; validated as a whole."""
    raw = {}
    if config_path:
        raw.update(load_file(config_path))
    raw.update(parse_lines(overrides, "--set"))
    values = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, DEFAULTS[key])
    if seed is not None:
        values["train.seeds"] = (int(seed),)
    cfg = RunConfig(values, out_dir or "runs/default")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    """Build every typed config once so conflicts surface as ConfigError before any work starts."""
    try:
        model_cfg = cfg.model_config()
        cfg.train_config()
        cfg.augment_config()
        DecodeConfig(**cfg.section("decode"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    n = model_cfg.encoder.num_regions
    if model_cfg.regional.tokens > n:
        raise ConfigError(f"regional.tokens={model_cfg.regional.tokens} exceeds the {n} encoder regions")
    if cfg["decode.max_length"] > model_cfg.decoder.max_positions:
        raise ConfigError("decode.max_length exceeds decoder.max_positions")
    if cfg["run.split"] not in ("train", "val", "test"):
        raise ConfigError(f"run.split must be train, val or test, got {cfg['run.split']!r}")
    if len(cfg["data.split_ratios"]) != 3 or abs(sum(cfg["data.split_ratios"]) - 1.0) > 1e-9:
        raise ConfigError("data.split_ratios must be three values summing to 1")
    parse_arms(cfg["ablate.arms"], n)
    for k in cfg["ablate.k_sweep"]:
        if not 1 <= int(k) <= n:
            raise ConfigError(f"ablate.k_sweep value {k} outside 1..{n}")


def parse_arms(specs, num_regions: int) -> tuple[list, list]:
    """``mode:K`` strings to unique (mode, K) pairs in first-seen order, plus the duplicates dropped."""
    arms, dupes = [], []
    for spec in specs:
        mode, _, k = str(spec).partition(":")
        try:
            arm = (RegionalConfig(mode=mode.strip()).mode, int(k) if k else RegionalConfig().tokens)
        except ValueError:
            raise ConfigError(f"bad ablation arm {spec!r}; expected mode:K") from None
        if not 1 <= arm[1] <= num_regions:
            raise ConfigError(f"ablation arm {spec!r}: K outside 1..{num_regions}")
        (dupes if arm in arms else arms).append(arm)
    return arms, dupes
