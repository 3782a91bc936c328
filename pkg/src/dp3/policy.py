"""Behavior cloning of the action-diffusion policy and receding-horizon control.

Chunk alignment: for the window ending at step ``t`` the predicted ``H``-step
chunk covers steps ``t - (H - n_act) .. t + n_act - 1``, so its last ``n_act``
entries are exactly the actions from ``t`` onward. With the default
``H=4, n_obs=2, n_act=3`` the chunk starts at the oldest observation.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffusion
from .env import Episode, Observation
from .numerics import ParamStore, adam_step, backward, load_checkpoint, save_checkpoint
from .perception import EncoderConfig, ObservationEncoder, stack_clouds, window_condition

log = logging.getLogger(__name__)

SIDECAR_FORMAT = "dp3-policy/1"


@dataclass(frozen=True)
class HorizonConfig:
    H: int = 4
    n_obs: int = 2
    n_act: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.n_act <= self.H:
            raise ValueError(f"need 1 <= n_act <= H, got n_act={self.n_act}, H={self.H}")
        if self.n_obs < 1:
            raise ValueError("n_obs must be at least 1")

    @property
    def lead(self) -> int:
        """Chunk steps that precede the current step."""
        return self.H - self.n_act


@dataclass
class Normalizer:
    """Independent per-dimension min-max maps onto ``[-1, 1]``.

    Dimensions with ``min == max`` normalize to 0 and denormalize to the constant.
    """

    obs_min: np.ndarray
    obs_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray

    def __post_init__(self) -> None:
        for name in ("obs_min", "obs_max", "act_min", "act_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.obs_min > self.obs_max) or np.any(self.act_min > self.act_max):
            raise ValueError("normalizer min exceeds max")

    @staticmethod
    def _fwd(x, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (np.asarray(x) - lo) / safe - 1.0, 0.0)

    @staticmethod
    def _inv(y, lo, hi):
        return lo + (np.asarray(y) + 1.0) * 0.5 * (hi - lo)

    @property
    def degenerate_obs(self) -> np.ndarray:
        return self.obs_min == self.obs_max

    @property
    def degenerate_act(self) -> np.ndarray:
        return self.act_min == self.act_max

    def normalize_obs(self, q):
        return self._fwd(q, self.obs_min, self.obs_max)

    def denormalize_obs(self, y):
        return self._inv(y, self.obs_min, self.obs_max)

    def normalize_action(self, a):
        return self._fwd(a, self.act_min, self.act_max)

    def denormalize_action(self, y):
        return self._inv(y, self.act_min, self.act_max)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("obs_min", "obs_max", "act_min", "act_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(v) for k, v in d.items()})


def fit_normalizer(episodes: Sequence[Episode]) -> Normalizer:
    steps = [s for ep in episodes for s in ep.steps]
    if not steps:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    poses = np.stack([s.pose for s in steps])
    actions = np.stack([s.action for s in steps])
    if not (np.all(np.isfinite(poses)) and np.all(np.isfinite(actions))):
        raise ValueError("dataset contains non-finite poses or actions")
    norm = Normalizer(poses.min(0), poses.max(0), actions.min(0), actions.max(0))
    if norm.degenerate_obs.any() or norm.degenerate_act.any():
        log.warning(
            "degenerate normalizer dims: obs %s act %s",
            np.nonzero(norm.degenerate_obs)[0].tolist(),
            np.nonzero(norm.degenerate_act)[0].tolist(),
        )
    return norm


@dataclass
class ChunkSet:
    """Training chunks referencing a flat list of observations."""

    visual: np.ndarray  # (M, N, C) padded clouds or (M, 84, 84) depths
    poses: np.ndarray  # (M, pose_dim) normalized
    window_index: np.ndarray  # (C, n_obs) rows into visual/poses
    actions: np.ndarray  # (C, H, A) normalized

    def __len__(self) -> int:
        return len(self.window_index)


def visual_input(obs_cloud_or_depth, cfg: EncoderConfig) -> np.ndarray:
    if cfg.observation_mode == "depth":
        return np.asarray(obs_cloud_or_depth.depth, dtype=np.float64)
    return obs_cloud_or_depth.cloud.features(cfg.use_color)


def build_chunks(episodes: Sequence[Episode], horizon: HorizonConfig, norm: Normalizer, enc: EncoderConfig) -> ChunkSet:
    """One chunk per demonstration step; out-of-episode indices repeat the edge value."""
    visuals, poses, windows, chunks = [], [], [], []
    offset = 0
    for ep in episodes:
        n = len(ep)
        if n == 0:
            continue
        for s in ep.steps:
            if enc.observation_mode == "depth":
                if s.depth is None:
                    raise ValueError("dataset lacks depth images; regenerate demos in depth mode")
                visuals.append(np.asarray(s.depth, dtype=np.float64))
            else:
                visuals.append(s.cloud.features(enc.use_color))
            poses.append(s.pose)
        acts = norm.normalize_action(ep.actions)
        for t in range(n):
            obs_idx = [min(max(t - horizon.n_obs + 1 + j, 0), n - 1) for j in range(horizon.n_obs)]
            windows.append([offset + i for i in obs_idx])
            act_idx = np.clip(np.arange(t - horizon.lead, t - horizon.lead + horizon.H), 0, n - 1)
            chunks.append(acts[act_idx])
        offset += n
    if not windows:
        raise ValueError("dataset has no steps")
    visual = stack_clouds(visuals) if enc.observation_mode == "cloud" else np.stack(visuals)
    return ChunkSet(
        visual=visual,
        poses=norm.normalize_obs(np.stack(poses)),
        window_index=np.asarray(windows, dtype=np.intp),
        actions=np.stack(chunks),
    )


@dataclass
class PolicyConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    action_dim: int = 3
    K: int = 100
    n_steps: int = 10
    schedule: str = "squared_cosine"
    prediction_mode: str = "sample"
    hidden: tuple[int, ...] = (256, 256)
    time_dim: int = 32
    eta: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["horizon"] = HorizonConfig(**d["horizon"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class Dp3Policy:
    """Observation encoder plus conditioned denoiser sharing one parameter store."""

    def __init__(self, cfg: PolicyConfig, normalizer: Normalizer, seed: int = 0) -> None:
        if cfg.prediction_mode not in diffusion.PREDICTION_MODES:
            raise ValueError(f"prediction_mode must be one of {diffusion.PREDICTION_MODES}")
        self.cfg = cfg
        self.normalizer = normalizer
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.encoder = ObservationEncoder(self.store, rng, cfg.encoder)
        self.cond_dim = cfg.horizon.n_obs * self.encoder.step_dim
        self.denoiser = diffusion.Denoiser(
            self.store,
            rng,
            (cfg.horizon.H, cfg.action_dim),
            self.cond_dim,
            hidden=tuple(cfg.hidden),
            time_dim=cfg.time_dim,
        )
        self.sched = diffusion.make_schedule(cfg.K, cfg.schedule)

    # training ------------------------------------------------------------

    def batch_loss(self, chunks: ChunkSet, idx: np.ndarray, rng: np.random.Generator):
        """Loss on chunks ``idx``; each distinct observation is encoded once."""
        win = chunks.window_index[idx]
        uniq, inverse = np.unique(win.reshape(-1), return_inverse=True)
        feats = self.encoder(chunks.visual[uniq], chunks.poses[uniq])
        cond = window_condition(feats, inverse.reshape(win.shape))
        return diffusion.training_loss(
            chunks.actions[idx], cond, self.denoiser, self.sched, self.cfg.prediction_mode, rng
        )

    # inference -----------------------------------------------------------

    def encode_steps(self, visual: Sequence[np.ndarray], poses: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Per-step features for raw observations (poses in environment units)."""
        q = self.normalizer.normalize_obs(np.asarray(poses, dtype=np.float64))
        out = []
        for lo in range(0, len(visual), chunk):
            part = visual[lo : lo + chunk]
            if self.cfg.encoder.observation_mode == "cloud":
                v = stack_clouds(part)
            else:
                v = np.stack(part)
            out.append(self.encoder(v, q[lo : lo + chunk]).data)
        return np.concatenate(out, axis=0)

    def sample_chunks(self, conditions: np.ndarray, init_noise: np.ndarray, rng=None) -> np.ndarray:
        """DDIM-sample normalized chunks ``(B, H, A)`` from ``a^K = init_noise``."""
        return diffusion.ddim_sample(
            self.denoiser,
            conditions,
            self.sched,
            init_noise.shape,
            n_steps=self.cfg.n_steps,
            eta=self.cfg.eta,
            rng=rng,
            mode=self.cfg.prediction_mode,
            init_noise=init_noise,
        )

    # persistence ---------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None, with_optimizer: bool = True) -> None:
        path = Path(path)
        save_checkpoint(path, self.store.state_dict(with_optimizer))
        sidecar = {
            "format": SIDECAR_FORMAT,
            "policy": self.cfg.to_dict(),
            "normalizer": self.normalizer.to_dict(),
        }
        if extra:
            sidecar.update(extra)
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["Dp3Policy", dict]:
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        if meta.get("format") != SIDECAR_FORMAT:
            raise ValueError(f"{sidecar_path(path)}: unknown sidecar format {meta.get('format')!r}")
        policy = cls(PolicyConfig.from_dict(meta["policy"]), Normalizer.from_dict(meta["normalizer"]))
        policy.store.load_state_dict(load_checkpoint(path))
        return policy, meta


def sidecar_path(ckpt: str | Path) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


@dataclass
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 128
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    seed: int = 0
    save_every: int = 100
    early_stop_patience: int | None = 300
    early_stop_window: int = 50
    target_loss: float | None = None


@dataclass
class TrainResult:
    policy: Dp3Policy
    losses: list[float]
    stopped_early: bool = False


def train_policy(
    episodes: Sequence[Episode],
    policy_cfg: PolicyConfig,
    train_cfg: TrainConfig,
    checkpoint: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train encoder and denoiser jointly on demonstration chunks.

    Each epoch draws ``ceil(chunks / batch_size)`` batches uniformly with
    replacement. Training stops early when the mean loss over the last
    ``early_stop_window`` epochs falls below ``target_loss`` or has not improved
    for ``early_stop_patience`` epochs. With ``checkpoint`` set, parameters, optimizer state and the
    generator state are saved every ``save_every`` epochs; ``resume`` continues
    from such a save and reproduces the uninterrupted run exactly.

    Raises:
        FloatingPointError: the loss became non-finite.
    """
    norm = fit_normalizer(episodes)
    chunks = build_chunks(episodes, policy_cfg.horizon, norm, policy_cfg.encoder)
    policy = Dp3Policy(policy_cfg, norm, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    losses: list[float] = []
    best, since_best = math.inf, 0
    start = 0
    if resume and checkpoint is not None and Path(checkpoint).exists():
        policy, meta = Dp3Policy.load(checkpoint)
        prog = meta["progress"]
        start = prog["epoch"]
        losses = list(prog["losses"])
        best, since_best = prog["best"], prog["since_best"]
        rng.bit_generator.state = prog["rng_state"]
        if prog.get("finished"):
            return TrainResult(policy, losses, prog.get("stopped_early", False))
        log.info("resuming at epoch %d", start)

    def save(epoch: int, finished: bool, stopped: bool) -> None:
        if checkpoint is None:
            return
        progress = {
            "epoch": epoch,
            "losses": losses,
            "best": best,
            "since_best": since_best,
            "rng_state": rng.bit_generator.state,
            "finished": finished,
            "stopped_early": stopped,
        }
        policy.save(checkpoint, {"progress": progress, "train": asdict(train_cfg)})

    n_batches = math.ceil(len(chunks) / train_cfg.batch_size)
    stopped = False
    for epoch in range(start, train_cfg.epochs):
        total = 0.0
        for _ in range(n_batches):
            idx = rng.integers(0, len(chunks), size=train_cfg.batch_size)
            policy.store.zero_grad()
            loss = policy.batch_loss(chunks, idx, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}")
            backward(loss)
            adam_step(policy.store, train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
            total += value
        losses.append(total / n_batches)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        w = train_cfg.early_stop_window
        if train_cfg.target_loss is not None and len(losses) >= w:
            if float(np.mean(losses[-w:])) < train_cfg.target_loss:
                log.info("window loss below target at epoch %d; stopping", epoch + 1)
                stopped = True
                break
        if train_cfg.early_stop_patience is not None and len(losses) >= w:
            recent = float(np.mean(losses[-w:]))
            if recent < best * (1.0 - 1e-3):
                best, since_best = recent, 0
            else:
                since_best += 1
                if since_best >= train_cfg.early_stop_patience:
                    log.info("loss plateau at epoch %d; stopping", epoch + 1)
                    stopped = True
                    break
        if train_cfg.save_every and (epoch + 1) % train_cfg.save_every == 0:
            save(epoch + 1, False, False)
    save(len(losses), True, stopped)
    return TrainResult(policy, losses, stopped)


# control -------------------------------------------------------------------

@dataclass
class ControllerState:
    """Per-episode controller memory: observation window and pending actions."""

    rng: np.random.Generator
    window: deque = field(default_factory=deque)  # [visual, pose, feature | None]
    queue: deque = field(default_factory=deque)
    n_plans: int = 0

    @classmethod
    def fresh(cls, seed) -> "ControllerState":
        return cls(rng=np.random.default_rng(seed))


class Controller:
    """Receding-horizon execution: plan ``H`` steps, run the last ``n_act``, replan."""

    def __init__(self, policy: Dp3Policy) -> None:
        self.policy = policy
        self.horizon = policy.cfg.horizon

    def _push(self, state: ControllerState, obs: Observation) -> None:
        visual = visual_input(obs, self.policy.cfg.encoder)
        state.window.append([visual, np.asarray(obs.pose, dtype=np.float64), None])
        while len(state.window) > self.horizon.n_obs:
            state.window.popleft()

    def _plan(self, states: Sequence[ControllerState]) -> None:
        n_obs = self.horizon.n_obs
        todo = [e for s in states for e in s.window if e[2] is None]
        if todo:
            feats = self.policy.encode_steps([e[0] for e in todo], np.stack([e[1] for e in todo]))
            for e, f in zip(todo, feats):
                e[2] = f
        conds = []
        for s in states:
            entries = list(s.window)
            entries = [entries[0]] * (n_obs - len(entries)) + entries
            conds.append(np.concatenate([e[2] for e in entries]))
        shape = (self.horizon.H, self.policy.cfg.action_dim)
        noise = np.stack([s.rng.standard_normal(shape) for s in states])
        chunks = self.policy.sample_chunks(np.stack(conds), noise)
        for s, chunk in zip(states, chunks):
            s.queue.extend(chunk[self.horizon.H - self.horizon.n_act :])
            s.n_plans += 1

    def act_many(self, states: Sequence[ControllerState], observations: Sequence[Observation]) -> np.ndarray:
        """Advance several independent episodes one step, batching any replans."""
        for s, obs in zip(states, observations):
            self._push(s, obs)
        need = [s for s in states if not s.queue]
        if need:
            self._plan(need)
        normalized = np.stack([s.queue.popleft() for s in states])
        return self.policy.normalizer.denormalize_action(np.clip(normalized, -1.0, 1.0))

    def act(self, state: ControllerState, obs: Observation) -> np.ndarray:
        return self.act_many([state], [obs])[0]
