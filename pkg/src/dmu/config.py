"""Experiment configuration: flat INI sections, file and flag overrides."""

from __future__ import annotations

import argparse
import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .engine import TrainConfig


@dataclass(frozen=True)
class DatasetSection:
    class_count: int = 10
    per_class: int = 200
    input_dim: int = 32
    spread: float = 0.3
    noise_fraction: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class SplitSection:
    kind: str = "extended_data"
    fraction: float = 0.3


@dataclass(frozen=True)
class BenchSection:
    per_class: int = 200
    query_per_class: int = 50
    sample_seed: int = 1
    metric: str = "map"
    k: int = 100
    far: float = 1e-2
    scatter_count: int = 300


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    warmup_epochs: int = 1
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    s: float = 30.0
    m: float = 0.3
    augment_noise: float = 0.0
    hidden: tuple[int, ...] = (64,)
    embedding_dim: int = 64
    adapter_hidden: int = 256
    coef_new: float = 1.0
    coef_compat: float = 1.0
    coef_fa: float = 1.0
    sbc_prototypes: str = "old"
    grad_clip: float = 0.0


@dataclass(frozen=True)
class SequenceSection:
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75)
    methods: tuple[str, ...] = ("bct", "dmu")


@dataclass(frozen=True)
class RunSection:
    output_dir: str = "runs"
    seed: int = 0


SECTIONS = {
    "dataset": DatasetSection,
    "split": SplitSection,
    "bench": BenchSection,
    "train": TrainSection,
    "sequence": SequenceSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    bench: BenchSection = field(default_factory=BenchSection)
    train: TrainSection = field(default_factory=TrainSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    run: RunSection = field(default_factory=RunSection)

    def train_config(self, method: str, seed: int | None = None) -> TrainConfig:
        kw = {f.name: getattr(self.train, f.name) for f in fields(TrainSection)}
        return TrainConfig(method=method, seed=self.run.seed if seed is None else seed, **kw)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def override(self, section: str, key: str, raw: str) -> "ExperimentConfig":
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ValueError(f"unknown key {key!r} in [{section}]")
        value = _parse(raw, getattr(sec, key))
        return replace(self, **{section: replace(sec, **{key: value})})


def _format(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, like: Any) -> Any:
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(like, tuple):
        elem = type(like[0]) if like else str
        return tuple(elem(x) for x in raw.split(",") if x.strip())
    return type(like)(raw)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Defaults, then whatever the file sets."""
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    if text is not None:
        cp.read_string(text)
    else:
        with open(path) as fh:
            cp.read_file(fh)
    for section in cp.sections():
        for key, raw in cp[section].items():
            cfg = cfg.override(section, key, raw)
    return cfg


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--section-key`` flag per config field, defaulting to "not given"."""
    for name, cls in SECTIONS.items():
        group = parser.add_argument_group(f"[{name}]")
        for f in fields(cls):
            flag = f"--{name}-{f.name}".replace("_", "-")
            group.add_argument(flag, dest=f"cfg__{name}__{f.name}", default=None, metavar="V")


def apply_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    for dest, raw in vars(args).items():
        if dest.startswith("cfg__") and raw is not None:
            _, section, key = dest.split("__")
            cfg = cfg.override(section, key, raw)
    return cfg
