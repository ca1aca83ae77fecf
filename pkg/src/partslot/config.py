"""Run configuration: one INI file with a section per consumer.

Sections and their dataclasses::

    [run]     seed, out_dir
    [corpus]  CorpusConfig
    [model]   ModelConfig
    [loss]    LossConfig
    [optim]   AdamConfig
    [train]   TrainConfig

Every key is optional; missing keys take the dataclass default.  Floats are
written with ``repr`` so parse -> write -> parse is lossless.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import CorpusConfig
from .errors import ConfigurationError
from .kernel.optim import AdamConfig
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": AdamConfig,
    "train": TrainConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: AdamConfig = field(default_factory=lambda: AdamConfig(lr=DESK_LR))
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        self.train.validate()
        if self.model.encoder_depth == 0 and self.model.dim != self.corpus.token_dim:
            raise ConfigurationError("a depth-0 encoder needs model.dim == corpus.token_dim")


DESK_LR = 1e-3


def desk_preset() -> RunConfig:
    """Desk-scale defaults (single CPU core, minutes)."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Hyperparameters reported for the full-scale model, on the synthetic corpus."""
    cfg = RunConfig()
    cfg.model.num_slots = 8
    cfg.model.iters = 5
    cfg.loss.tau = 0.015
    cfg.train.batch_size = 128
    cfg.train.epochs = 60
    cfg.train.schedule = "cosine"
    cfg.train.warmup_epochs = 5
    return cfg


def tiny_preset() -> RunConfig:
    """The small configuration used for finite-difference gradient checks."""
    cfg = RunConfig()
    cfg.corpus = CorpusConfig(num_identities=5, num_parts=3, num_patches=6, grid_rows=2,
                              text_len=5, attr_dim=4, token_dim=8, values_per_part=3,
                              filler_words=2, images_per_id=2, captions_per_id=2,
                              heldout_captions=1)
    cfg.model = ModelConfig(dim=8, num_slots=3, iters=2, encoder_depth=1, mlp_ratio=2)
    cfg.train.batch_size = 4
    return cfg


PRESETS = {"desk": desk_preset, "paper": paper_preset, "tiny": tiny_preset}


def _parse(value: str, ftype, name: str):
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if ftype == "bool":
            low = value.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(value)
            return low == "true"
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {value!r} as {ftype}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_from(cls, items: dict[str, str], section: str, base):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dataclasses.asdict(base)
    for key, raw in items.items():
        if key not in known:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        kwargs[key] = _parse(raw, known[key].type, f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}]: {exc}") from None


def loads(text: str, preset: str = "desk") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            for key, raw in items.items():
                if key == "seed":
                    cfg.seed = _parse(raw, "int", "[run] seed")
                elif key == "out_dir":
                    cfg.out_dir = raw
                else:
                    raise ConfigurationError(f"unknown key [run] {key}")
        elif section in SECTIONS:
            setattr(cfg, section, _section_from(SECTIONS[section], items, section,
                                                getattr(cfg, section)))
        else:
            raise ConfigurationError(f"unknown section [{section}]")
    cfg.validate()
    return cfg


def load(path: str | Path, preset: str = "desk") -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return loads(text, preset)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
