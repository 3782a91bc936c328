"""Experiment steps shared by the CLI and the acceptance suite."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..env import Episode, grid_targets, rollout_expert, uniform_targets
from ..policy import Dp3Policy, TrainResult, train_policy
from ..rollout import evaluate
from .config import ConfigError, ExperimentConfig, build_config
from .dataset import save_dataset
from .metrics import MetricsReport, aligned_table, csv_text, write_report

log = logging.getLogger(__name__)

# axis -> (dotted config key, value when on, value when off)
ABLATION_AXES: dict[str, tuple[str, object, object]] = {
    "cropping": ("env.crop", True, False),
    "layernorm": ("encoder.use_layernorm", True, False),
    "sample_pred": ("diffusion.prediction_mode", "sample", "epsilon"),
    "projection": ("encoder.use_projection", True, False),
    "color": ("encoder.use_color", True, False),
    "depth": ("env.observation_mode", "depth", "cloud"),
}


def demo_targets(cfg: ExperimentConfig) -> np.ndarray:
    e = cfg.env
    if e.target_sampler == "fixed":
        return np.asarray(e.demo_targets, dtype=np.float64).reshape(-1, 3)
    if e.target_sampler == "uniform":
        return uniform_targets(e.n_demos, cfg.seed)
    grid = grid_targets(e.grid_n)
    pick = np.random.default_rng(cfg.seed).permutation(len(grid))[: e.n_demos]
    return grid[np.sort(pick)]


def eval_targets(cfg: ExperimentConfig) -> np.ndarray:
    v = cfg.eval
    if v.sampler == "grid":
        return grid_targets(v.grid_n)
    if v.sampler == "uniform":
        # offset keeps eval draws apart from uniform demo draws
        return uniform_targets(v.episodes, cfg.seed + 1)
    if not v.targets:
        raise ConfigError("eval.sampler=fixed needs eval.targets")
    return np.asarray(v.targets, dtype=np.float64)


def demo_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence((seed, 1)).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_demos(cfg: ExperimentConfig) -> list[Episode]:
    env_cfg = cfg.env_config()
    targets = demo_targets(cfg)
    mode = cfg.env.observation_mode
    return [rollout_expert(env_cfg, g, s, mode) for g, s in zip(targets, demo_seeds(cfg.seed, len(targets)))]


def loss_csv_path(ckpt: str | Path) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".loss.csv")


def config_path(artifact: str | Path) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".config.yaml")


def run_train(cfg: ExperimentConfig, episodes: Sequence[Episode], ckpt: str | Path, resume: bool = False) -> TrainResult:
    ckpt = Path(ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    config_path(ckpt).write_text(cfg.to_yaml())
    result = train_policy(
        episodes,
        cfg.policy_config(),
        cfg.train_config(),
        checkpoint=ckpt,
        resume=resume,
        on_epoch=lambda e, l: log.debug("epoch %d loss %.6f", e + 1, l),
    )
    rows = [{"epoch": i + 1, "loss": repr(l)} for i, l in enumerate(result.losses)]
    loss_csv_path(ckpt).write_text(csv_text(rows, ["epoch", "loss"]))
    return result


def run_eval(cfg: ExperimentConfig, policy: Dp3Policy, out_dir: str | Path) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    t0 = time.perf_counter()
    res = evaluate(policy, cfg.env_config(), eval_targets(cfg), seed=cfg.seed)
    report = MetricsReport.from_rollout(res)
    write_report(out, report, wall_clock=time.perf_counter() - t0)
    return report


@dataclass
class ArmResult:
    name: str
    settings: dict[str, str]
    report: MetricsReport


def ablation_arms(axes: Sequence[str]) -> list[dict[str, str]]:
    """Cross product of on/off per axis, all-on first."""
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axes {unknown}; choose from {sorted(ABLATION_AXES)}")
    if len(set(axes)) != len(axes):
        raise ConfigError("ablation axes must be distinct")
    return [dict(zip(axes, combo)) for combo in itertools.product(("on", "off"), repeat=len(axes))]


def arm_overrides(settings: dict[str, str]) -> list[str]:
    out = []
    for axis, state in settings.items():
        key, on, off = ABLATION_AXES[axis]
        value = on if state == "on" else off
        out.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return out


def run_ablation(raw: dict, axes: Sequence[str], out_dir: str | Path, overrides: Sequence[str] = ()) -> list[ArmResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for settings in ablation_arms(list(axes)):
        name = "_".join(f"{a}-{s}" for a, s in settings.items())
        cfg = build_config(raw, list(overrides) + arm_overrides(settings))
        arm = out / name
        arm.mkdir(exist_ok=True)
        (arm / "config.yaml").write_text(cfg.to_yaml())
        log.info("arm %s: generating demos", name)
        episodes = generate_demos(cfg)
        save_dataset(arm / "demos.dp3", episodes)
        log.info("arm %s: training", name)
        trained = run_train(cfg, episodes, arm / "policy.ckpt", resume=True)
        log.info("arm %s: evaluating", name)
        report = run_eval(cfg, trained.policy, arm / "eval")
        results.append(ArmResult(name, settings, report))
    rows = [{"arm": r.name, **r.settings, **r.report.summary_row()} for r in results]
    cols = ["arm", *axes, "success_rate", "successes", "episodes", "mean_len", "diffusion_calls"]
    (out / "ablation.txt").write_text(aligned_table(rows, cols))
    (out / "ablation.csv").write_text(csv_text(rows, cols))
    return results
