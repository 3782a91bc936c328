"""Observation encoders producing the per-step conditioning feature.

Per observation step the feature is ``[cloud feature (64) ; pose feature (64)]``;
the conditioning vector stacks ``n_obs`` such steps oldest first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    EmptyInputError,
    ParamStore,
    ShapeError,
    Tensor,
    add_layer_norm,
    add_linear,
    concat,
    layer_norm,
    linear,
    max_pool_points,
    relu,
    reshape,
    take_rows,
)

DEPTH_SIZE = 84
CLOUD_WIDTHS = (64, 128, 256)
FEATURE_DIM = 64


class Dp3Encoder:
    """Shared per-point MLP, max-pool over points, then a projection head.

    ``channels -> 64 -> 128 -> 256`` with Linear + LayerNorm + ReLU per layer,
    then ``256 -> 64`` Linear + LayerNorm. The LayerNorms and the projection
    can be switched off for ablations; without projection the output is 256-d.
    """

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        channels: int = 3,
        use_layernorm: bool = True,
        use_projection: bool = True,
        prefix: str = "cloud",
    ) -> None:
        self.channels = channels
        self.use_layernorm = use_layernorm
        self.use_projection = use_projection
        self.layers = []
        fan_in = channels
        for i, width in enumerate(CLOUD_WIDTHS):
            W, b = add_linear(store, rng, f"{prefix}.mlp{i}", fan_in, width)
            ln = add_layer_norm(store, f"{prefix}.mlp{i}.ln", width) if use_layernorm else None
            self.layers.append((W, b, ln))
            fan_in = width
        self.proj = None
        if use_projection:
            W, b = add_linear(store, rng, f"{prefix}.proj", fan_in, FEATURE_DIM)
            ln = add_layer_norm(store, f"{prefix}.proj.ln", FEATURE_DIM) if use_layernorm else None
            self.proj = (W, b, ln)
        self.out_dim = FEATURE_DIM if use_projection else CLOUD_WIDTHS[-1]

    def __call__(self, points) -> Tensor:
        """``(..., N, channels)`` points to ``(..., out_dim)`` features."""
        x = points if isinstance(points, Tensor) else Tensor(points)
        if x.ndim < 2 or x.shape[-1] != self.channels:
            raise ShapeError(f"expected (..., N, {self.channels}) points, got {x.shape}")
        if x.shape[-2] == 0:
            raise EmptyInputError("cannot encode an empty point cloud")
        for W, b, ln in self.layers:
            x = linear(x, W, b)
            if ln is not None:
                x = layer_norm(x, *ln)
            x = relu(x)
        x = max_pool_points(x)
        if self.proj is not None:
            W, b, ln = self.proj
            x = linear(x, W, b)
            if ln is not None:
                x = layer_norm(x, *ln)
        return x


class PoseEncoder:
    """``dim -> 64 -> ReLU -> 64`` MLP on the (normalized) robot pose."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, dim: int, prefix: str = "pose") -> None:
        self.dim = dim
        self.l0 = add_linear(store, rng, f"{prefix}.fc0", dim, FEATURE_DIM)
        self.l1 = add_linear(store, rng, f"{prefix}.fc1", FEATURE_DIM, FEATURE_DIM)
        self.out_dim = FEATURE_DIM

    def __call__(self, q) -> Tensor:
        q = q if isinstance(q, Tensor) else Tensor(q)
        if q.shape[-1] != self.dim:
            raise ShapeError(f"pose has {q.shape[-1]} dims, encoder expects {self.dim}")
        return linear(relu(linear(q, *self.l0)), *self.l1)


class DepthEncoder:
    """Flattened 84x84 depth image through ``7056 -> 256 -> ReLU -> 128``.

    Stand-in for an image-based policy encoder; it takes the place of the
    point-cloud feature in the per-step condition.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, prefix: str = "depth") -> None:
        n = DEPTH_SIZE * DEPTH_SIZE
        self.l0 = add_linear(store, rng, f"{prefix}.fc0", n, 256)
        self.l1 = add_linear(store, rng, f"{prefix}.fc1", 256, 128)
        self.out_dim = 128

    def __call__(self, depth) -> Tensor:
        d = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
        if d.shape[-2:] != (DEPTH_SIZE, DEPTH_SIZE):
            raise ShapeError(f"depth images must be {DEPTH_SIZE}x{DEPTH_SIZE}, got {d.shape}")
        flat = Tensor(d.reshape(*d.shape[:-2], DEPTH_SIZE * DEPTH_SIZE))
        return linear(relu(linear(flat, *self.l0)), *self.l1)


@dataclass
class EncoderConfig:
    observation_mode: str = "cloud"
    use_color: bool = False
    use_layernorm: bool = True
    use_projection: bool = True
    pose_dim: int = 3


class ObservationEncoder:
    """Visual encoder (cloud or depth) plus pose encoder, concatenated per step."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: EncoderConfig) -> None:
        if cfg.observation_mode not in ("cloud", "depth"):
            raise ValueError(f"unknown observation mode {cfg.observation_mode!r}")
        self.cfg = cfg
        if cfg.observation_mode == "cloud":
            self.visual = Dp3Encoder(
                store,
                rng,
                channels=6 if cfg.use_color else 3,
                use_layernorm=cfg.use_layernorm,
                use_projection=cfg.use_projection,
            )
        else:
            self.visual = DepthEncoder(store, rng)
        self.pose = PoseEncoder(store, rng, cfg.pose_dim)
        self.step_dim = self.visual.out_dim + self.pose.out_dim

    def __call__(self, visual, poses) -> Tensor:
        """Encode ``U`` observations: padded clouds ``(U, N, C)`` or depths ``(U, 84, 84)``."""
        return concat([self.visual(visual), self.pose(poses)], axis=-1)


def stack_clouds(clouds: Sequence[np.ndarray]) -> np.ndarray:
    """Stack variable-size ``(N_i, C)`` clouds into ``(U, max N, C)``.

    Short clouds are padded with copies of their first point; max pooling is
    unaffected by duplicates, so encodings are exactly those of the unpadded clouds.
    """
    if any(len(c) == 0 for c in clouds):
        raise EmptyInputError("cannot encode an empty point cloud")
    n = max(len(c) for c in clouds)
    out = np.empty((len(clouds), n, clouds[0].shape[1]))
    for i, c in enumerate(clouds):
        out[i, : len(c)] = c
        out[i, len(c) :] = c[0]
    return out


def encode_cloud(points: np.ndarray, encoder: Dp3Encoder) -> np.ndarray:
    return encoder(np.asarray(points, dtype=np.float64)).data


def encode_pose(q: np.ndarray, encoder: PoseEncoder) -> np.ndarray:
    return encoder(np.asarray(q, dtype=np.float64)).data


def window_condition(step_features: Tensor, window_index: np.ndarray) -> Tensor:
    """Gather per-step features into flattened ``(B, n_obs * step_dim)`` conditions.

    Args:
        step_features: ``(U, step_dim)`` encodings of distinct observations.
        window_index: ``(B, n_obs)`` rows of ``step_features``, oldest first.
    """
    window_index = np.asarray(window_index)
    b, n_obs = window_index.shape
    picked = take_rows(step_features, window_index.reshape(-1))
    return reshape(picked, (b, n_obs * step_features.shape[-1]))


def make_condition(window: Sequence[tuple[np.ndarray, np.ndarray]], encoder: ObservationEncoder, n_obs: int) -> np.ndarray:
    """Condition vector for one window of ``(visual, pose)`` pairs, oldest first."""
    if len(window) != n_obs:
        raise ValueError(f"window holds {len(window)} observations, expected {n_obs}")
    if encoder.cfg.observation_mode == "cloud":
        visual = stack_clouds([np.asarray(v, dtype=np.float64) for v, _ in window])
    else:
        visual = np.stack([np.asarray(v, dtype=np.float64) for v, _ in window])
    poses = np.stack([np.asarray(q, dtype=np.float64) for _, q in window])
    feats = encoder(visual, poses)
    return feats.data.reshape(-1)
