"""INI run configuration: [dataset], [model], [training], [evaluation], [output].

Every key is validated before any work starts; unknown sections or keys
are rejected. ``MIREC_OUTPUT_ROOT`` overrides ``[output] dir``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import FORMATS
from .evaluation import CandidatePolicy
from .model import LossConfig, ModelConfig
from .training import TrainingConfig

OUTPUT_ENV = "MIREC_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    format: str = "movielens1m"
    path: str = ""
    head_fraction: float = 0.2
    title_vocab_size: int = 5000
    include_zero_ratings: bool = True
    split_seed: int = 0
    curriculum_seed: int = 0

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"dataset.format must be one of {FORMATS}")
        if not 0 < self.head_fraction < 1:
            raise ValueError("dataset.head_fraction must lie in (0, 1)")
        if self.title_vocab_size < 1:
            raise ValueError("dataset.title_vocab_size must be >= 1")


DEFAULT_K = {"movielens1m": 10, "bookcrossing": 100}


@dataclass
class EvaluationConfig:
    k: int | None = None  # None: per-format default from DEFAULT_K
    candidate_policy: str = "full_catalog"
    sample_size: int = 100
    sample_seed: int = 0

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("evaluation.k must be >= 1")
        self.policy()

    def policy(self) -> CandidatePolicy:
        return CandidatePolicy(self.candidate_policy, self.sample_size, self.sample_seed)


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.evaluation.k is None:
            self.evaluation.k = DEFAULT_K[self.dataset.format]

    @property
    def loss(self) -> LossConfig:
        return self.training.loss

    @property
    def output(self) -> Path:
        return Path(self.output_dir)

    @property
    def dataset_dir(self) -> Path:
        return self.output / "dataset"


_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_OPTIONAL = {"clip_norm": float, "early_stopping_patience": int, "k": int}


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _OPTIONAL:
            return None if raw.lower() in ("", "none", "off") else _OPTIONAL[key](raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _section_values(parser, section: str, cls, extra_ok=()) -> tuple[dict, dict]:
    defaults = {f.name: f.default for f in fields(cls) if f.name != "loss"}
    known, extra = {}, {}
    if not parser.has_section(section):
        return known, extra
    for key, raw in parser.items(section):
        if key in defaults:
            known[key] = _convert(section, key, raw, defaults[key])
        elif key in extra_ok:
            extra[key] = raw
        else:
            raise ConfigError(f"[{section}] unknown key {key!r}")
    return known, extra


def load_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Read an INI file (or ``text``) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for ov in overrides:
        lhs, sep, value = ov.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    allowed = {"dataset", "model", "training", "evaluation", "output"}
    for s in parser.sections():
        if s not in allowed:
            raise ConfigError(f"unknown config section [{s}]")
    try:
        ds, _ = _section_values(parser, "dataset", DatasetConfig)
        model, loss_raw = _section_values(parser, "model", ModelConfig, _LOSS_KEYS)
        loss_defaults = {f.name: f.default for f in fields(LossConfig)}
        loss = {k: _convert("model", k, v, loss_defaults[k]) for k, v in loss_raw.items()}
        train, _ = _section_values(parser, "training", TrainingConfig)
        ev, _ = _section_values(parser, "evaluation", EvaluationConfig)
        out_dir = "runs"
        if parser.has_section("output"):
            for key, raw in parser.items("output"):
                if key != "dir":
                    raise ConfigError(f"[output] unknown key {key!r}")
                out_dir = raw.strip()
        out_dir = os.environ.get(OUTPUT_ENV) or out_dir
        cfg = RunConfig(
            DatasetConfig(**ds),
            ModelConfig(**model),
            TrainingConfig(loss=LossConfig(**loss), **train),
            EvaluationConfig(**ev),
            out_dir,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if path is not None and cfg.dataset.path and not Path(cfg.dataset.path).is_absolute():
        cfg.dataset.path = str((Path(path).parent / cfg.dataset.path).resolve())
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable INI text for a RunConfig."""
    lines = ["[dataset]"]
    lines += [f"{f.name} = {getattr(cfg.dataset, f.name)}" for f in fields(DatasetConfig)]
    lines += ["", "[model]"]
    lines += [f"{f.name} = {getattr(cfg.model, f.name)}" for f in fields(ModelConfig)]
    lines += [f"{f.name} = {getattr(cfg.loss, f.name)}" for f in fields(LossConfig)]
    lines += ["", "[training]"]
    lines += [f"{f.name} = {getattr(cfg.training, f.name)}" for f in fields(TrainingConfig) if f.name != "loss"]
    lines += ["", "[evaluation]"]
    lines += [f"{f.name} = {getattr(cfg.evaluation, f.name)}" for f in fields(EvaluationConfig)]
    lines += ["", "[output]", f"dir = {cfg.output_dir}", ""]
    return "\n".join(lines)
