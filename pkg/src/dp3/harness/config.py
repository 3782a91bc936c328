"""Experiment configuration: validated schema, YAML loading and dotted overrides.

Grammar: a YAML mapping whose top-level keys are ``seed``, ``env``,
``encoder``, ``diffusion``, ``horizon``, ``train`` and ``eval``. Every key is
optional (defaults fill in) and unknown keys are rejected. Overrides use
``section.key=value`` with the value parsed as a YAML scalar or flow list,
e.g. ``diffusion.prediction_mode=epsilon`` or ``env.crop_min=[0,0,0.02]``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..env import DEFAULT_DEMO_TARGETS, Reach3DConfig
from ..perception import EncoderConfig
from ..pointcloud import Aabb
from ..policy import HorizonConfig, PolicyConfig, TrainConfig

SEED_ENV_VAR = "DP3_SEED"

Vec3 = tuple[float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Section):
    target_sampler: Literal["fixed", "uniform", "grid"] = "fixed"
    demo_targets: list[Vec3] = Field(default_factory=lambda: [tuple(t) for t in DEFAULT_DEMO_TARGETS])
    n_demos: int = Field(5, ge=1, description="demo count for the uniform and grid samplers")
    grid_n: int = Field(10, ge=1)
    n_distractors: int = Field(0, ge=0)
    crop: bool = True
    crop_min: Vec3 = (-0.1, -0.1, 0.01)
    crop_max: Vec3 = (1.1, 1.1, 1.1)
    fps_points: int = Field(512, ge=1)
    observation_mode: Literal["cloud", "depth"] = "cloud"
    horizon: int = Field(50, ge=1)
    success_radius: float = Field(0.02, gt=0)
    max_step: float = Field(0.05, gt=0)

    @model_validator(mode="after")
    def _box(self) -> "EnvSection":
        if any(lo > hi for lo, hi in zip(self.crop_min, self.crop_max)):
            raise ValueError("env.crop_min must not exceed env.crop_max on any axis")
        return self


class EncoderSection(_Section):
    use_color: bool = False
    use_projection: bool = True
    use_layernorm: bool = True


class DiffusionSection(_Section):
    K: int = Field(100, ge=1)
    n_steps: int = Field(10, ge=1)
    schedule: Literal["squared_cosine", "linear"] = "squared_cosine"
    prediction_mode: Literal["sample", "epsilon"] = "sample"
    hidden: list[int] = Field(default_factory=lambda: [256, 256], min_length=1)
    time_dim: int = Field(32, ge=2)
    eta: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _steps(self) -> "DiffusionSection":
        if self.n_steps > self.K:
            raise ValueError(f"diffusion.n_steps ({self.n_steps}) must not exceed diffusion.K ({self.K})")
        if self.time_dim % 2:
            raise ValueError("diffusion.time_dim must be even")
        return self


class HorizonSection(_Section):
    H: int = Field(4, ge=1)
    n_obs: int = Field(2, ge=1)
    n_act: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _order(self) -> "HorizonSection":
        if self.n_act > self.H:
            raise ValueError(f"horizon.n_act ({self.n_act}) must not exceed horizon.H ({self.H})")
        return self


class TrainSection(_Section):
    epochs: int = Field(3000, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-4, gt=0)
    save_every: int = Field(100, ge=0)
    early_stop_patience: int | None = Field(300, ge=1)
    target_loss: float | None = Field(None, gt=0)


class EvalSection(_Section):
    sampler: Literal["grid", "uniform", "fixed"] = "grid"
    grid_n: int = Field(10, ge=1)
    episodes: int = Field(1000, ge=1, description="episode count for the uniform sampler")
    targets: list[Vec3] = Field(default_factory=list, description="targets for the fixed sampler")


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    env: EnvSection = Field(default_factory=EnvSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    horizon: HorizonSection = Field(default_factory=HorizonSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    # conversions to the library configs -----------------------------------

    def env_config(self) -> Reach3DConfig:
        e = self.env
        return Reach3DConfig(
            horizon=e.horizon,
            success_radius=e.success_radius,
            max_step=e.max_step,
            n_distractors=e.n_distractors,
            crop=e.crop,
            crop_box=Aabb(e.crop_min, e.crop_max),
            fps_points=e.fps_points,
        )

    def policy_config(self) -> PolicyConfig:
        d = self.diffusion
        return PolicyConfig(
            encoder=EncoderConfig(
                observation_mode=self.env.observation_mode,
                use_color=self.encoder.use_color,
                use_layernorm=self.encoder.use_layernorm,
                use_projection=self.encoder.use_projection,
            ),
            horizon=HorizonConfig(self.horizon.H, self.horizon.n_obs, self.horizon.n_act),
            K=d.K,
            n_steps=d.n_steps,
            schedule=d.schedule,
            prediction_mode=d.prediction_mode,
            hidden=tuple(d.hidden),
            time_dim=d.time_dim,
            eta=d.eta,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            seed=self.seed,
            save_every=t.save_every,
            early_stop_patience=t.early_stop_patience,
            target_loss=t.target_loss,
        )

    def to_yaml(self) -> str:
        """Fully resolved config with defaults materialized."""
        return yaml.safe_dump(json.loads(self.model_dump_json()), sort_keys=True)


class ConfigError(ValueError):
    pass


def json_schema() -> dict:
    """The published schema every config is validated against."""
    return ExperimentConfig.model_json_schema()


def parse_override(text: str) -> tuple[list[str], Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return key.strip().split("."), yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = value
    return out


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def build_config(raw: dict | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Validate a raw mapping plus overrides; ``DP3_SEED`` fills an unset seed."""
    raw = dict(raw or {})
    raw = apply_overrides(raw, list(overrides or []))
    if "seed" not in raw and os.environ.get(SEED_ENV_VAR):
        try:
            raw["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {os.environ[SEED_ENV_VAR]!r}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
    return build_config(raw, overrides)
