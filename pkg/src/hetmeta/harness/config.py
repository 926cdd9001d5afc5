"""Experiment configuration: defaults, JSON config files and CLI overrides.

Values resolve with precedence flags > file > defaults. Model widths and
learning rates default to the published settings (F1=128, F2=64, F3=64,
epsilon=0.1, alpha=0.01, beta=1e-4, 10 inner steps); ``presets/`` holds a
paper-scale and a CI-scale file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from ..hetmaml import HETMAML, MAML, MULTI_MAML_BF, TrainConfig
from ..nn import Architecture
from ..tasks import DEFAULT_EPSILON, DEFAULT_K_QUERY, HTDSpec

MODEL_KINDS = (HETMAML, MAML, MULTI_MAML_BF)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def parse_types(text: str, M: int | None = None) -> tuple[tuple[int, ...], ...]:
    """Parse ``"X1,X2,X1+X2"`` into binary masks over ``M`` modalities.

    ``M`` defaults to the highest modality index mentioned.
    """
    groups = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise ConfigError(f"empty task type in {text!r}")
        idx = []
        for tok in part.split("+"):
            tok = tok.strip()
            if len(tok) < 2 or tok[0] not in "Xx" or not tok[1:].isdigit() or int(tok[1:]) < 1:
                raise ConfigError(f"bad modality token {tok!r} in {text!r}; expected X1, X2, ...")
            idx.append(int(tok[1:]) - 1)
        groups.append(sorted(set(idx)))
    top = max(max(g) for g in groups) + 1
    if M is None:
        M = top
    elif top > M:
        raise ConfigError(f"task types {text!r} mention X{top} but only {M} modalities exist")
    masks = tuple(tuple(int(m in g) for m in range(M)) for g in groups)
    if len(set(masks)) != len(masks):
        raise ConfigError(f"task types {text!r} list the same modality set twice")
    return masks


def format_types(masks) -> str:
    return ",".join("+".join(f"X{m + 1}" for m, v in enumerate(mask) if v) for mask in masks)


@dataclass
class SyntheticParams:
    classes: int = 40
    separation: float = 4.0
    noise: float = 1.0
    shared_latent: bool = False
    data_seed: int = 0
    test_tasks: int = 300

    def validate(self) -> None:
        if self.classes < 2:
            raise ConfigError("synthetic.classes must be >= 2")
        if not self.separation > 0 or not self.noise >= 0:
            raise ConfigError("synthetic.separation must be > 0 and synthetic.noise >= 0")
        if self.test_tasks < 1:
            raise ConfigError("synthetic.test_tasks must be >= 1")


@dataclass
class ExperimentConfig:
    model: str = HETMAML
    modality_dims: tuple[int, ...] = (16, 12)
    task_types: tuple[tuple[int, ...], ...] = ((1, 0), (0, 1), (1, 1))
    type_weights: tuple[float, ...] | None = None
    n_way: int = 5
    k_shot: int = 1
    k_query: int = DEFAULT_K_QUERY
    f1: int = 128
    f2: int = 64
    f3: int = 64
    alpha: float = 1e-2
    beta: float = 1e-4
    inner_steps: int = 10
    meta_batch: int = 4
    iterations: int = 1000
    second_order: bool = True
    optimizer: str = "sgd"
    epsilon: float = DEFAULT_EPSILON
    workers: int = 1
    seed: int = 0
    dataset: str | None = None
    test_dataset: str | None = None
    synthetic: SyntheticParams | None = field(default_factory=SyntheticParams)
    out: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {', '.join(MODEL_KINDS)}, got {self.model!r}")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of 'dataset' and 'synthetic'")
        if self.synthetic is not None:
            self.synthetic.validate()
        try:
            self.spec()
            self.arch()
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def spec(self) -> HTDSpec:
        return HTDSpec(
            tuple(self.modality_dims),
            tuple(tuple(t) for t in self.task_types),
            None if self.type_weights is None else tuple(self.type_weights),
            self.n_way,
            self.k_shot,
            self.k_query,
        )

    def arch(self, dims=None) -> Architecture:
        return Architecture(tuple(dims or self.modality_dims), self.f1, self.f2, self.f3, self.n_way)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            beta=self.beta,
            inner_steps=self.inner_steps,
            meta_batch=self.meta_batch,
            iterations=self.iterations,
            second_order=self.second_order,
            seed=self.seed,
            optimizer=self.optimizer,
            epsilon=self.epsilon,
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_types"] = format_types(self.task_types)
        d["modality_dims"] = list(self.modality_dims)
        return d


_FIELDS = {f.name for f in fields(ExperimentConfig)}
_SYN_FIELDS = {f.name for f in fields(SyntheticParams)}


def _apply(cfg: ExperimentConfig, values: Mapping[str, Any], origin: str) -> None:
    for key, val in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        if key == "synthetic":
            if val is None:
                cfg.synthetic = None
                continue
            if not isinstance(val, Mapping):
                raise ConfigError(f"{origin}: 'synthetic' must be an object or null")
            bad = set(val) - _SYN_FIELDS
            if bad:
                raise ConfigError(f"{origin}: unknown synthetic key(s) {sorted(bad)}")
            base = cfg.synthetic or SyntheticParams()
            cfg.synthetic = SyntheticParams(**{**asdict(base), **val})
            continue
        if key == "dataset" and val is not None and "synthetic" not in values:
            cfg.synthetic = None
        if key == "task_types" and isinstance(val, str):
            val = parse_types(val, len(cfg.modality_dims) if "modality_dims" not in values else len(values["modality_dims"]))
        elif key in ("modality_dims", "type_weights") and val is not None:
            val = tuple(val)
        elif key == "task_types":
            val = tuple(tuple(int(v) for v in t) for t in val)
        setattr(cfg, key, val)


def load_config_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def preset(name: str) -> dict:
    """Load a bundled preset (``paper`` or ``tiny``)."""
    try:
        text = resources.files(__package__).joinpath("presets", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return json.loads(text)


def resolve(file_values: Mapping[str, Any] | None = None, flags: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then file values, then non-None flag values."""
    cfg = ExperimentConfig()
    if file_values:
        _apply(cfg, file_values, "config file")
    if flags:
        _apply(cfg, {k: v for k, v in flags.items() if v is not None}, "command line")
    return cfg.validate()
