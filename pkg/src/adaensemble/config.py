"""Run configuration: an INI file with one section per concern.

::

    [run]        seed
    [data]       train, val, test, schema, delimiter
    [synthetic]  used when [data] names no train file
    [features]   bins, min_frequency, continuous_transform
    [model]      ModelConfig keys except vocab_sizes and seed
    [training]   BiLevelConfig keys except seed

Lists are comma separated; ``none`` clears an optional value.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .synthetic import MULTIPLICATIVE, Interaction, SyntheticSpec
from .training import BiLevelConfig

_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(BiLevelConfig)}


@dataclass
class DataSection:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    schema: str | None = None
    delimiter: str = "\t"


@dataclass
class SyntheticSection:
    num_fields: int = 6
    levels: int = 12
    latent_dim: int = 4
    coefficient: float = 2.0
    label_noise: float = 0.0
    num_train: int = 20_000
    num_val: int = 5_000
    num_test: int = 5_000
    seed: int | None = None

    def spec(self, default_seed: int) -> SyntheticSpec:
        pairs = tuple(
            Interaction((i, i + 1), MULTIPLICATIVE, self.coefficient) for i in range(0, self.num_fields - 1, 2)
        )
        return SyntheticSpec(
            num_fields=self.num_fields,
            levels=self.levels,
            latent_dim=self.latent_dim,
            interactions=pairs,
            label_noise=self.label_noise,
            num_examples=self.num_train + self.num_val + self.num_test,
            seed=default_seed if self.seed is None else self.seed,
        )


@dataclass
class FeatureSection:
    bins: int = 64
    min_frequency: int = 20
    continuous_transform: str = "quantile"
    embedding_dim: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    def model_config(self, vocab_sizes) -> ModelConfig:
        kw = dict(self.model)
        kw["vocab_sizes"] = tuple(vocab_sizes)
        kw["seed"] = self.seed
        return ModelConfig.from_dict(kw).validate()

    def training_config(self, max_steps: int | None = None) -> BiLevelConfig:
        kw = dict(self.training)
        kw["seed"] = self.seed
        if max_steps is not None:
            kw["max_steps"] = max_steps
        try:
            return BiLevelConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[training] {exc}") from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        for name in ("data", "synthetic", "features"):
            section = getattr(self, name)
            cp[name] = {k: _fmt(v) for k, v in dataclasses.asdict(section).items()}
        cp["model"] = {k: _fmt(v) for k, v in sorted(self.model.items())}
        cp["training"] = {k: _fmt(v) for k, v in sorted(self.training.items())}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "synthetic": dataclasses.asdict(self.synthetic),
            "features": dataclasses.asdict(self.features),
            "model": dict(self.model),
            "training": dict(self.training),
        }


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return "; ".join(",".join(map(str, x)) for x in v)
        return ",".join(map(str, v))
    if v == "\t":
        return "\\t"
    return str(v)


def _coerce(raw: str, annotation: str, key: str, section: str):
    raw = raw.strip()
    optional = "None" in annotation
    if optional and raw.lower() == "none":
        return None
    try:
        if annotation.startswith("tuple[tuple"):
            return tuple(tuple(p.strip() for p in grp.split(",") if p.strip()) for grp in raw.split(";"))
        if annotation.startswith("tuple[float"):
            return tuple(float(p) for p in raw.split(","))
        if annotation.startswith("tuple[int"):
            return tuple(int(p) for p in raw.split(","))
        if annotation.startswith("tuple[str"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if annotation.startswith("int"):
            return int(raw)
        if annotation.startswith("float"):
            return float(raw)
        if annotation.startswith("bool"):
            return raw.lower() in ("1", "true", "yes", "on")
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {annotation}") from None
    if annotation.startswith("str"):
        return raw.encode().decode("unicode_escape") if key == "delimiter" else raw
    raise ConfigError(f"[{section}] {key}: unsupported type {annotation}")


def _fill(section_cls, items: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    kw = {}
    for k, raw in items.items():
        if k not in fields:
            raise ConfigError(f"[{section}] unknown key {k!r}; expected one of {sorted(fields)}")
        kw[k] = _coerce(raw, str(fields[k].type), k, section)
    return section_cls(**kw)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config file is not valid INI: {exc}") from exc
    known = {"run", "data", "synthetic", "features", "model", "training"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown config section [{sec}]; expected one of {sorted(known)}")
    cfg = RunConfig()
    if cp.has_section("run"):
        run = dict(cp["run"])
        extra = set(run) - {"seed"}
        if extra:
            raise ConfigError(f"[run] unknown key(s) {sorted(extra)}")
        if "seed" in run:
            cfg.seed = _coerce(run["seed"], "int", "seed", "run")
    if cp.has_section("data"):
        cfg.data = _fill(DataSection, dict(cp["data"]), "data")
    if cp.has_section("synthetic"):
        cfg.synthetic = _fill(SyntheticSection, dict(cp["synthetic"]), "synthetic")
    if cp.has_section("features"):
        cfg.features = _fill(FeatureSection, dict(cp["features"]), "features")
    if cp.has_section("model"):
        for k, raw in cp["model"].items():
            if k not in _MODEL_KEYS or k in ("vocab_sizes", "seed"):
                raise ConfigError(f"[model] unknown key {k!r}")
            cfg.model[k] = _coerce(raw, str(_MODEL_KEYS[k].type), k, "model")
    if cp.has_section("training"):
        for k, raw in cp["training"].items():
            if k not in _TRAIN_KEYS or k == "seed":
                raise ConfigError(f"[training] unknown key {k!r}")
            cfg.training[k] = _coerce(raw, str(_TRAIN_KEYS[k].type), k, "training")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())
