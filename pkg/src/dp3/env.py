"""Reach3D: move a gripper marker onto a target marker inside the unit cube.

The scene is a cube marker at the gripper, a sphere marker at the target, a
ground patch at ``z = 0`` and optional distractor cubes. Each observation
re-samples surface points from an episode-seeded generator, so an episode is
reproducible from its seed and action sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import Aabb, CameraModel, PointCloud, crop, fps, rasterize_depth

WORKSPACE_LOW = 0.0
WORKSPACE_HIGH = 1.0
START = np.array([0.5, 0.5, 0.5])
GRIPPER_SIDE = 0.04
TARGET_RADIUS = 0.03
DISTRACTOR_SIDE = 0.06

GRIPPER_COLOR = (0.5, 0.5, 0.5)
TARGET_COLOR = (0.9, 0.1, 0.1)
GROUND_COLOR = (0.6, 0.45, 0.3)

# Per-axis offsets from START are distinct odd multiples of the max step with both
# signs on every axis, so demos show axes finishing at different times.
DEFAULT_DEMO_TARGETS = (
    (0.85, 0.35, 0.75),
    (0.25, 0.85, 0.35),
    (0.65, 0.75, 0.15),
    (0.15, 0.25, 0.65),
    (0.35, 0.55, 0.85),
)


def default_camera() -> CameraModel:
    """Pinhole at (0.5, -0.8, 0.9) aimed at the workspace center.

    Focal length 60 px keeps all eight workspace corners inside the 84x84 frame.
    """
    return CameraModel.look_at((0.5, -0.8, 0.9), (0.5, 0.5, 0.5), 60.0, 60.0, 42.0, 42.0, 84, 84)


@dataclass
class Reach3DConfig:
    horizon: int = 50
    success_radius: float = 0.02
    max_step: float = 0.05
    gripper_points: int = 64
    target_points: int = 64
    ground_points: int = 256
    n_distractors: int = 0
    distractor_points: int = 64
    crop: bool = True
    crop_box: Aabb = field(default_factory=lambda: Aabb((-0.1, -0.1, 0.01), (1.1, 1.1, 1.1)))
    fps_points: int = 512
    camera: CameraModel = field(default_factory=default_camera)


@dataclass
class Observation:
    cloud: PointCloud
    pose: np.ndarray
    depth: np.ndarray | None = None


@dataclass
class EpisodeStep:
    cloud: PointCloud
    depth: np.ndarray | None
    pose: np.ndarray
    action: np.ndarray
    success: bool


@dataclass
class Episode:
    steps: list[EpisodeStep]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def poses(self) -> np.ndarray:
        return np.stack([s.pose for s in self.steps])

    @property
    def actions(self) -> np.ndarray:
        return np.stack([s.action for s in self.steps])


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def sample_cube_surface(rng: np.random.Generator, center, side: float, n: int) -> np.ndarray:
    half = side / 2.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for ax in range(3):
        rows = axis == ax
        others = [a for a in range(3) if a != ax]
        pts[rows, ax] = sign[rows] * half
        pts[np.ix_(rows, others)] = uv[rows]
    return pts + np.asarray(center)


def sample_sphere_surface(rng: np.random.Generator, center, radius: float, n: int) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d


def sample_ground(rng: np.random.Generator, n: int) -> np.ndarray:
    xy = rng.uniform(WORKSPACE_LOW, WORKSPACE_HIGH, size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def grid_targets(n: int = 10) -> np.ndarray:
    """Cell centers of an ``n x n x n`` grid over the workspace."""
    c = (np.arange(n) + 0.5) / n
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def uniform_targets(count: int, seed: int, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    return np.random.default_rng(seed).uniform(low, high, size=(count, 3))


def scripted_expert(pose: np.ndarray, target: np.ndarray, max_step: float = 0.05) -> np.ndarray:
    """Straight-line reach: the offset to the target, clipped per component."""
    return np.clip(np.asarray(target) - np.asarray(pose), -max_step, max_step)


class Reach3D:
    def __init__(self, cfg: Reach3DConfig | None = None) -> None:
        self.cfg = cfg or Reach3DConfig()
        self.pos = START.copy()
        self.goal = START.copy()
        self.t = 0
        self.done = True
        self.success = False
        self.distractors = np.zeros((0, 3))
        self.distractor_colors = np.zeros((0, 3))
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int, target=None, mode: str = "cloud") -> Observation:
        """Start an episode at the workspace center.

        ``target`` defaults to a uniform draw from the episode generator.
        """
        self._rng = np.random.default_rng(seed)
        if target is None:
            target = self._rng.uniform(0.05, 0.95, size=3)
        self.goal = np.clip(np.asarray(target, dtype=np.float64), WORKSPACE_LOW, WORKSPACE_HIGH)
        self.pos = START.copy()
        self.t = 0
        self.done = False
        self.success = False
        n = self.cfg.n_distractors
        self.distractors = self._rng.uniform(0.1, 0.9, size=(n, 3))
        self.distractor_colors = self._rng.uniform(0.0, 1.0, size=(n, 3))
        return self.observe(mode)

    def raw_cloud(self) -> PointCloud:
        cfg = self.cfg
        rng = self._rng
        parts = [
            sample_cube_surface(rng, self.pos, GRIPPER_SIDE, cfg.gripper_points),
            sample_sphere_surface(rng, self.goal, TARGET_RADIUS, cfg.target_points),
            sample_ground(rng, cfg.ground_points),
        ]
        colors = [
            np.tile(GRIPPER_COLOR, (cfg.gripper_points, 1)),
            np.tile(TARGET_COLOR, (cfg.target_points, 1)),
            np.tile(GROUND_COLOR, (cfg.ground_points, 1)),
        ]
        for center, color in zip(self.distractors, self.distractor_colors):
            parts.append(sample_cube_surface(rng, center, DISTRACTOR_SIDE, cfg.distractor_points))
            colors.append(np.tile(color, (cfg.distractor_points, 1)))
        return PointCloud(np.concatenate(parts), np.concatenate(colors))

    def observe(self, mode: str = "cloud") -> Observation:
        """Sample the scene; ``mode="depth"`` also renders the 84x84 depth image."""
        if mode not in ("cloud", "depth"):
            raise ValueError(f"unknown observation mode {mode!r}")
        raw = self.raw_cloud()
        depth = _f32(rasterize_depth(raw.points, self.cfg.camera)) if mode == "depth" else None
        cloud = crop(raw, self.cfg.crop_box) if self.cfg.crop else raw
        if len(cloud) == 0:
            cloud = raw
        cloud = fps(cloud, self.cfg.fps_points, self._rng)
        cloud = PointCloud(_f32(cloud.points), _f32(cloud.colors))
        return Observation(cloud=cloud, pose=_f32(self.pos), depth=depth)

    def step(self, action, mode: str = "cloud") -> tuple[Observation, bool, bool]:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        delta = np.clip(np.asarray(action, dtype=np.float64), -self.cfg.max_step, self.cfg.max_step)
        self.pos = np.clip(self.pos + delta, WORKSPACE_LOW, WORKSPACE_HIGH)
        self.t += 1
        self.success = bool(np.linalg.norm(self.pos - self.goal) < self.cfg.success_radius)
        self.done = self.success or self.t >= self.cfg.horizon
        return self.observe(mode), self.done, self.success

    def expert_action(self) -> np.ndarray:
        return scripted_expert(self.pos, self.goal, self.cfg.max_step)


def rollout_expert(cfg: Reach3DConfig, target, seed: int, mode: str = "cloud") -> Episode:
    """Record one scripted-expert episode (observation before each action)."""
    env = Reach3D(cfg)
    obs = env.reset(seed, target, mode)
    steps: list[EpisodeStep] = []
    done = False
    while not done:
        action = _f32(env.expert_action())
        next_obs, done, success = env.step(action, mode)
        steps.append(EpisodeStep(obs.cloud, obs.depth, obs.pose, action, success))
        obs = next_obs
    return Episode(steps)
