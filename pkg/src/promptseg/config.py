"""Run configuration: dataclasses, the key=value file format, and hashing.

The file format is INI-style with exactly seven sections (encoder, dpat,
mpg, decoder, data, train, eval). Unknown sections or keys are rejected.
Two hashes are derived: the full config hash stamped into every output,
and a model hash over the architecture-shaping sections used for
checkpoint compatibility checks.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Bad config file: unknown key, unparsable value, or invalid setting."""


@dataclass
class EncoderConfig:
    kind: str = "toy"                 # toy | imported
    image_size: int = 64
    channels: tuple = (48, 48, 32)    # per-tap channel counts (c1, c2, c3)
    stride: int = 4
    weight_seed: int = 2177


@dataclass
class DpatConfig:
    enabled: bool = True
    ccs_mode: str = "ccs"             # none | ccs | pm-map
    pinv_reg_rel: float = 1e-12       # lambda = rel * trace(PtP) / 2, applied always


@dataclass
class MpgConfig:
    enabled: bool = True              # off = dense-only baseline head
    reduced_channels: int = 16        # c_r
    output_channels: int = 32         # c_o, must match the mask decoder
    sparse_count: int = 4             # k sparse embeddings
    blocks: int = 2                   # transformer decoder depth
    fem_sizes: tuple = (16, 8, 4, 2)  # pyramid pooling bin sizes


@dataclass
class DecoderConfig:
    attn_channels: int = 16           # single-head projection width
    ffn_channels: int = 32
    blocks: int = 2


@dataclass
class DataConfig:
    image_size: int = 64
    train_classes: tuple = (0, 1, 2, 3, 4, 5)
    eval_classes: tuple = (6, 7)
    samples_per_class: int = 40
    invert: bool = False              # source-domain rendering knobs
    noise: float = 0.02
    texture_freq: float = 2.0
    blur: int = 0
    palette_seed: int = 0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_episodes: int = 4
    steps: int = 2000
    shots: int = 1
    seed: int = 7
    precision: str = "float32"
    preset: str = "desk"              # desk | paper


@dataclass
class EvalConfig:
    runs: int = 5
    episodes_per_run: int = 200
    seed: int = 101
    aggregation: str = "class-accumulate"   # class-accumulate | episode-mean
    invert: bool = True               # shifted-domain rendering knobs
    noise: float = 0.05
    texture_freq: float = 6.0
    blur: int = 1
    palette_seed: int = 7


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dpat: DpatConfig = field(default_factory=DpatConfig)
    mpg: MpgConfig = field(default_factory=MpgConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = ("encoder", "dpat", "mpg", "decoder", "data", "train", "eval")
MODEL_SECTIONS = ("encoder", "dpat", "mpg", "decoder")

# applied before file values when train.preset = paper
PAPER_PRESET = {
    "encoder": {"kind": "imported", "image_size": 1024,
                "channels": (768, 768, 256), "stride": 16},
    "mpg": {"reduced_channels": 64, "output_channels": 256,
            "fem_sizes": (60, 30, 15, 8)},
    "decoder": {"attn_channels": 128, "ffn_channels": 256},
    "data": {"image_size": 1024},
}


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            return tuple(int(x.strip()) for x in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {where} = {raw!r}") from exc


def load_config(path: str | None = None) -> RunConfig:
    """Read a config file (or defaults when path is None) into a RunConfig."""
    cfg = RunConfig()
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            raw[section] = dict(parser.items(section))

    preset = raw.get("train", {}).get("preset", cfg.train.preset).strip()
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    if preset == "paper":
        for section, values in PAPER_PRESET.items():
            sub = getattr(cfg, section)
            for key, val in values.items():
                setattr(sub, key, val)
        cfg.train.preset = "paper"

    for section, items in raw.items():
        sub = getattr(cfg, section)
        known = {f.name: getattr(sub, f.name) for f in dataclasses.fields(sub)}
        for key, rawval in items.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(sub, key, _parse_value(rawval, known[key], f"{section}.{key}"))

    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.encoder.kind not in ("toy", "imported"):
        raise ConfigError(f"encoder.kind must be toy or imported, got {cfg.encoder.kind!r}")
    if len(cfg.encoder.channels) != 3:
        raise ConfigError("encoder.channels needs exactly three entries")
    if cfg.encoder.channels[0] != cfg.encoder.channels[1]:
        raise ConfigError("the first two feature taps must share a channel count")
    if cfg.encoder.image_size % cfg.encoder.stride != 0:
        raise ConfigError("encoder.image_size must be divisible by encoder.stride")
    if cfg.dpat.ccs_mode not in ("none", "ccs", "pm-map"):
        raise ConfigError(f"dpat.ccs_mode must be none, ccs or pm-map, got {cfg.dpat.ccs_mode!r}")
    if cfg.mpg.sparse_count < 1:
        raise ConfigError("mpg.sparse_count must be >= 1")
    if not cfg.mpg.fem_sizes:
        raise ConfigError("mpg.fem_sizes must list at least one bin size")
    if cfg.train.precision not in ("float32", "float64"):
        raise ConfigError(f"train.precision must be float32 or float64, got {cfg.train.precision!r}")
    if cfg.train.shots not in (1, 5):
        raise ConfigError("train.shots must be 1 or 5")
    if cfg.train.preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {cfg.train.preset!r}")
    if cfg.eval.aggregation not in ("class-accumulate", "episode-mean"):
        raise ConfigError(f"unknown eval.aggregation {cfg.eval.aggregation!r}")
    overlap = set(cfg.data.train_classes) & set(cfg.data.eval_classes)
    if overlap:
        raise ConfigError(f"train and eval classes overlap: {sorted(overlap)}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_lines(cfg: RunConfig, sections=SECTIONS) -> list[str]:
    lines = []
    for section in sections:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name}={_fmt(getattr(sub, f.name))}")
    return sorted(lines)


def config_hash(cfg: RunConfig) -> str:
    text = "\n".join(canonical_lines(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def model_hash(cfg: RunConfig) -> str:
    """Hash over the architecture-shaping sections only."""
    text = "\n".join(canonical_lines(cfg, MODEL_SECTIONS))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig back to the file format (for output embedding)."""
    out = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in dataclasses.fields(sub):
            out.append(f"{f.name} = {_fmt(getattr(sub, f.name))}")
        out.append("")
    return "\n".join(out)
