"""Binary episode datasets.

Layout, little-endian throughout::

    b"DP3DATA1"  u32 version  u32 n_episodes
    per episode: u32 n_steps
      per step: five arrays (cloud points, colors, depth, pose, action),
                each u32 element count then that many f32,
                then u8 success

Clouds and colors are ``(count / 3, 3)``; depth is square. An empty colors
or depth array means the field is absent.
"""
from __future__ import annotations

import io
import math
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from ..env import Episode, EpisodeStep
from ..pointcloud import PointCloud

DATASET_MAGIC = b"DP3DATA1"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


def _write_array(f: BinaryIO, a: np.ndarray | None) -> None:
    if a is None:
        f.write(struct.pack("<I", 0))
        return
    flat = np.ascontiguousarray(a, dtype="<f4").reshape(-1)
    f.write(struct.pack("<I", flat.size))
    f.write(flat.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetError("truncated dataset")
    return data


def _read_array(f: BinaryIO) -> np.ndarray:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").astype(np.float64)


def write_episodes(f: BinaryIO, episodes: Sequence[Episode]) -> None:
    f.write(DATASET_MAGIC)
    f.write(struct.pack("<II", DATASET_VERSION, len(episodes)))
    for ep in episodes:
        f.write(struct.pack("<I", len(ep)))
        for s in ep.steps:
            _write_array(f, s.cloud.points)
            _write_array(f, s.cloud.colors)
            _write_array(f, s.depth)
            _write_array(f, s.pose)
            _write_array(f, s.action)
            f.write(struct.pack("<B", 1 if s.success else 0))


def read_episodes(f: BinaryIO) -> list[Episode]:
    if _read_exact(f, len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise DatasetError("not a DP3DATA1 dataset")
    version, n_eps = struct.unpack("<II", _read_exact(f, 8))
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    episodes = []
    for _ in range(n_eps):
        (n_steps,) = struct.unpack("<I", _read_exact(f, 4))
        steps = []
        for _ in range(n_steps):
            pts, cols, depth, pose, action = (_read_array(f) for _ in range(5))
            (flag,) = struct.unpack("<B", _read_exact(f, 1))
            if pts.size % 3 or cols.size not in (0, pts.size):
                raise DatasetError("cloud arrays are not (N, 3)")
            if depth.size:
                side = math.isqrt(depth.size)
                if side * side != depth.size:
                    raise DatasetError("depth image is not square")
                depth = depth.reshape(side, side)
            cloud = PointCloud(pts.reshape(-1, 3), cols.reshape(-1, 3) if cols.size else None)
            steps.append(EpisodeStep(cloud, depth if depth.size else None, pose, action, bool(flag)))
        episodes.append(Episode(steps))
    if f.read(1):
        raise DatasetError("trailing bytes after last episode")
    return episodes


def dataset_bytes(episodes: Sequence[Episode]) -> bytes:
    buf = io.BytesIO()
    write_episodes(buf, episodes)
    return buf.getvalue()


def save_dataset(path: str | Path, episodes: Sequence[Episode]) -> None:
    Path(path).write_bytes(dataset_bytes(episodes))


def load_dataset(path: str | Path) -> list[Episode]:
    with open(path, "rb") as f:
        return read_episodes(f)
