"""Run configuration and its file format.

Config files are sectioned ``key = value`` text::

    # comments start with '#' or ';'
    [model]
    variant = moae          ; none | softmoe | moae
    d = 32
    [optim]
    preset = desk           ; desk | paper
    seed = 0

Sections: ``model``, ``loss``, ``optim``, ``data``. Unknown sections or keys
are errors. Values are parsed as the field's type; tuples are comma lists.
Command-line flags are applied on top of the file.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace

from .datasynth import SyntheticSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .moae import VARIANTS, MoAEConfig

BASELINE_CHOICES = ("none", "triplet", "hard_triplet", "npair", "supcon")
PROTOCOLS = ("intra", "loto")

PRESETS = {
    "desk": {"lr": 1e-3, "weight_decay": 5e-4, "iterations": 2000},
    "paper": {"lr": 1e-6, "weight_decay": 5e-4, "iterations": 300},
}


@dataclass(frozen=True)
class ModelSection:
    variant: str = "moae"
    image_side: int = 16
    patch_side: int = 4
    d: int = 32
    blocks: int = 2
    embed_dim: int = 16
    h: int = 2
    m: int = 4
    s: int = 1
    expert_hidden: int = 0  # 0 -> 2 * d / h

    def encoder_config(self) -> EncoderConfig:
        grid = self.image_side // max(self.patch_side, 1)
        moae = MoAEConfig(d=self.d, h=self.h, m=self.m, s=self.s, p=grid * grid + 1,
                          expert_hidden=self.expert_hidden or None)
        return EncoderConfig(image_side=self.image_side, patch_side=self.patch_side, d=self.d,
                             blocks=self.blocks, embed_dim=self.embed_dim,
                             variant=self.variant, moae=moae)


@dataclass(frozen=True)
class LossSection:
    dm: bool = True
    cdm: bool = True
    t: float = 0.5
    baseline: str = "none"
    margin: float = 0.3
    temperature: float = 0.1


@dataclass(frozen=True)
class OptimSection:
    preset: str = "desk"
    algorithm: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 5e-4
    iterations: int = 2000
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    protocol: str = "intra"
    held_type: int = 0  # 0 -> the rare type
    attack_types: int = 4
    dims: int = 16
    n_per_type: int = 150
    gap: float = 1.5
    type_radius: float = 6.0
    rare_factor: float = 1.5
    live_spread: float = 1.0
    test_fraction: float = 0.2
    dev_fraction: float = 0.1
    data_seed: int = -1  # -1 -> follow optim.seed

    def synthetic_spec(self, image_side: int, patch_side: int, seed: int) -> SyntheticSpec:
        return SyntheticSpec(dims=self.dims, attack_types=self.attack_types,
                             live_spread=self.live_spread, gap=self.gap,
                             type_radius=self.type_radius, rare_factor=self.rare_factor,
                             n_per_type=self.n_per_type,
                             seed=seed if self.data_seed < 0 else self.data_seed,
                             image_side=image_side, patch_side=patch_side)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.model.variant!r}")
        if self.loss.baseline not in BASELINE_CHOICES:
            raise ConfigError(f"loss.baseline must be one of {BASELINE_CHOICES}")
        if self.optim.preset not in PRESETS:
            raise ConfigError(f"optim.preset must be one of {tuple(PRESETS)}")
        if self.optim.algorithm != "adam":
            raise ConfigError("optim.algorithm: only 'adam' is supported")
        if self.data.protocol not in PROTOCOLS:
            raise ConfigError(f"data.protocol must be one of {PROTOCOLS}")
        if self.optim.iterations < 0:
            raise ConfigError("optim.iterations must be >= 0")
        if not 0 <= self.data.held_type <= self.data.attack_types:
            raise ConfigError(f"data.held_type must lie in 0..{self.data.attack_types}")
        self.model.encoder_config()

    @property
    def seed(self) -> int:
        return self.optim.seed

    @property
    def held_type(self) -> int:
        return self.data.held_type or self.synthetic_spec().rare

    def encoder_config(self) -> EncoderConfig:
        return self.model.encoder_config()

    def synthetic_spec(self) -> SyntheticSpec:
        return self.data.synthetic_spec(self.model.image_side, self.model.patch_side, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        buf = io.StringIO()
        for sec in fields(self):
            buf.write(f"[{sec.name}]\n")
            for key, val in dataclasses.asdict(getattr(self, sec.name)).items():
                buf.write(f"{key} = {_format(val)}\n")
            buf.write("\n")
        return buf.getvalue()


def _format(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val) if isinstance(val, float) else str(val)


def _parse(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from exc


def with_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    """Apply ``{section: {key: raw_or_typed_value}}``; preset values fill optim first."""
    sections = {}
    for sec in fields(RunConfig):
        current = getattr(cfg, sec.name)
        given = dict(overrides.get(sec.name, {}))
        if sec.name == "optim" and "preset" in given:
            preset = str(given["preset"]).strip()
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
            given = {**PRESETS[preset], **given}
        known = {f.name: f.type for f in fields(current)}
        typed = {}
        for key, val in given.items():
            if key not in known:
                raise ConfigError(f"unknown key {sec.name}.{key}")
            typed[key] = _parse(val, known[key], f"{sec.name}.{key}") if isinstance(val, str) else val
        sections[sec.name] = replace(current, **typed)
    unknown = set(overrides) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    return RunConfig(**sections)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                       comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    overrides = {name: dict(parser[name]) for name in parser.sections()}
    return with_overrides(base or RunConfig(), overrides)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
