"""Lock-step evaluation of a policy over many Reach3D episodes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Reach3D, Reach3DConfig
from .policy import Controller, ControllerState, Dp3Policy


@dataclass
class RolloutResult:
    targets: np.ndarray
    success: np.ndarray
    lengths: np.ndarray
    diffusion_calls: np.ndarray


def episode_seeds(seed: int, n: int) -> tuple[list[int], list[np.random.SeedSequence]]:
    """Independent environment seeds and controller streams per episode."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(n)
    env_seeds = [int(c.generate_state(1)[0]) for c in children]
    ctrl = [c.spawn(1)[0] for c in children]
    return env_seeds, ctrl


def evaluate(policy: Dp3Policy, env_cfg: Reach3DConfig, targets: np.ndarray, seed: int = 0) -> RolloutResult:
    """Roll the policy from every target once; episodes advance together so replans batch."""
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    mode = policy.cfg.encoder.observation_mode
    env_seeds, ctrl_seeds = episode_seeds(seed, n)
    envs = [Reach3D(env_cfg) for _ in range(n)]
    obs = [env.reset(s, g, mode) for env, s, g in zip(envs, env_seeds, targets)]
    states = [ControllerState(rng=np.random.default_rng(s)) for s in ctrl_seeds]
    controller = Controller(policy)
    active = list(range(n))
    while active:
        actions = controller.act_many([states[i] for i in active], [obs[i] for i in active])
        still = []
        for i, a in zip(active, actions):
            obs[i], done, _ = envs[i].step(a, mode)
            if not done:
                still.append(i)
        active = still
    return RolloutResult(
        targets=targets,
        success=np.array([e.success for e in envs]),
        lengths=np.array([e.t for e in envs]),
        diffusion_calls=np.array([s.n_plans for s in states]),
    )
