"""Run configuration: every field defaulted, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, MissingFileError
from .imgattack import DEFAULT_SCALES, AttackConfig
from .models import config_hash
from .txtattack import TextAttackConfig

METHODS = (
    "fga", "fda", "fga_t", "fga_t_aug", "mfga_t_aug",
    "fga_targeted", "fga_patch", "fga_targeted_patch",
)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    source: Literal["synthetic", "cifar10"] = "synthetic"
    cifar_path: Optional[str] = None
    cifar_limit: Optional[int] = Field(default=None, ge=1)
    num_classes: int = Field(default=10, ge=2)
    per_class: int = Field(default=80, ge=2)
    test_per_class: int = Field(default=20, ge=1)
    shape: list[int] = [3, 16, 16]
    noise_sigma: float = Field(default=0.1, ge=0)
    contrast: float = Field(default=0.05, gt=0, le=1)
    captions_per_image: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("shape must be [C, H, W] with positive entries")
        if self.source == "cifar10" and not self.cifar_path:
            raise ValueError("cifar10 source needs cifar_path")
        return self


class ModelConfig(_Section):
    dim: int = Field(default=32, ge=1)
    image_hidden: list[int] = [128, 128]
    image_hidden_b: list[int] = [96, 96]        # second model of a transfer pair
    token_dim: int = Field(default=32, ge=1)
    text_hidden: list[int] = [64]
    normalize: bool = True


class TrainConfig(_Section):
    epochs: int = Field(default=30, ge=1)
    lr: float = Field(default=0.5, gt=0)
    temperature: float = Field(default=0.1, gt=0)
    batch_size: int = Field(default=64, ge=1)


class AttackSection(_Section):
    method: Literal[METHODS] = "fga"
    norm: Literal["inf", "2", "1"] = "inf"
    epsilon: float = Field(default=2 / 255, ge=0)
    steps: int = Field(default=10, ge=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    momentum_mu: float = Field(default=1.0, ge=0)
    q_percentile: float = Field(default=90.0, ge=0, le=100)
    scales: list[float] = list(DEFAULT_SCALES)
    include_identity_scale: bool = True
    random_start: bool = False
    guidance: Literal["captions", "class_mean", "prompt", "topk", "topk_union"] = "captions"
    topk: int = Field(default=5, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    text_budget: int = Field(default=1, ge=0)
    candidate_source: Literal["synonyms", "knn"] = "synonyms"
    knn_k: int = Field(default=8, ge=1)
    patch_area: float = Field(default=0.02, gt=0, le=1)
    patch_steps: int = Field(default=100, ge=1)
    patch_alpha: float = Field(default=8 / 255, gt=0)
    target_offset: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, ge=1)
    split: Literal["test", "all"] = "test"      # which examples attack/eval operate on

    @model_validator(mode="after")
    def _l1_defaults(self):
        # l1 budgets live on a different scale; apply its defaults unless set
        if self.norm == "1":
            if "epsilon" not in self.model_fields_set:
                self.epsilon = 1.0
            if "steps" not in self.model_fields_set:
                self.steps = 20
        return self

    def image_config(self, seed: int, method: str | None = None) -> AttackConfig:
        method = method or self.method
        return AttackConfig(
            norm=self.norm, epsilon=self.epsilon, steps=self.steps, alpha=self.alpha,
            momentum=method.startswith("mfga"), momentum_mu=self.momentum_mu,
            q_percentile=self.q_percentile,
            scales=tuple(self.scales) if method.endswith("_aug") else None,
            include_identity_scale=self.include_identity_scale,
            random_start=self.random_start, seed=seed,
        )

    def text_config(self, seed: int) -> TextAttackConfig:
        return TextAttackConfig(budget=self.text_budget, candidate_source=self.candidate_source,
                                knn_k=self.knn_k, seed=seed)


class EvalConfig(_Section):
    ks: list[int] = [1, 5, 10]


class TransferConfig(_Section):
    methods: list[Literal[METHODS]] = ["fga_t", "fga_t_aug", "mfga_t_aug"]


class AblateConfig(_Section):
    method: Literal["fga", "fda"] = "fga"
    eps_255: list[float] = [0.5, 1, 2, 4, 8, 16]
    steps: list[int] = [1, 3, 7, 10]
    step_sweep_eps_255: float = 0.5


class InputsConfig(_Section):
    dataset: Optional[str] = None         # prefix written by gen-data
    checkpoint: Optional[str] = None
    adversarial: Optional[str] = None
    reports: list[str] = []


class RunConfig(_Section):
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    threads: int = Field(default=1, ge=1)
    out: str = "runs"
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    attack: AttackSection = AttackSection()
    eval: EvalConfig = EvalConfig()
    transfer: TransferConfig = TransferConfig()
    ablate: AblateConfig = AblateConfig()
    inputs: InputsConfig = InputsConfig()

    def echo(self) -> dict:
        """Resolved config minus fields that must not change results."""
        d = self.model_dump(mode="json")
        d.pop("threads")
        d.pop("out")
        return d

    def hash(self) -> str:
        return config_hash(self.echo())


def _format_validation(err: ValidationError, source: str) -> str:
    parts = []
    for e in err.errors():
        key = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{source}: {key}: {e['msg']}")
    return "; ".join(parts)


def parse_config(obj: dict, source="<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as err:
        raise ConfigError(_format_validation(err, source)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults), apply top-level overrides, resolve paths."""
    obj: dict = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"no such config file: {path}")
        source = str(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{source}: line {err.lineno}: {err.msg}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{source}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is not None:
            obj[key] = value
    cfg = parse_config(obj, source)
    base = path.parent if path is not None else Path.cwd()
    cfg.out = str((base / cfg.out).resolve())
    inp = cfg.inputs
    for name in ("dataset", "checkpoint", "adversarial"):
        val = getattr(inp, name)
        if val is not None:
            setattr(inp, name, str((base / val).resolve()))
    inp.reports = [str((base / r).resolve()) for r in inp.reports]
    if cfg.data.cifar_path:
        cfg.data.cifar_path = str((base / cfg.data.cifar_path).resolve())
    return cfg
