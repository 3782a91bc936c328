"""Depth-to-cloud conversion, box cropping and farthest point sampling.

Conventions: pixel ``(u, v)`` is (column, row) so ``depth[v, u]`` is its value;
the camera frame is x right, y down, z forward; ``extrinsic`` maps camera
coordinates to world coordinates. Depth value 0 marks an invalid pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self) -> None:
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        object.__setattr__(self, "extrinsic", ext)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if ext.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        R = ext[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")
        if not np.allclose(ext[3], [0, 0, 0, 1]):
            raise ValueError("extrinsic must be a rigid homogeneous transform")

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        up=(0.0, 0.0, 1.0),
    ) -> "CameraModel":
        """Camera at ``eye`` whose optical axis passes through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        ext = np.eye(4)
        ext[:3, :3] = np.stack([right, down, forward], axis=1)
        ext[:3, 3] = eye
        return cls(fx, fy, cx, cy, width, height, ext)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must have one row per point")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, index) -> "PointCloud":
        colors = None if self.colors is None else self.colors[index]
        return PointCloud(self.points[index], colors)

    def features(self, use_color: bool = False) -> np.ndarray:
        """``(N, 3)`` xyz, or ``(N, 6)`` xyzrgb when ``use_color``."""
        if not use_color:
            return self.points
        if self.colors is None:
            raise ValueError("cloud carries no colors")
        return np.concatenate([self.points, self.colors], axis=1)


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.min) > np.asarray(self.max)):
            raise ValueError(f"box min {self.min} exceeds max {self.max}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= np.asarray(self.min)) & (p <= np.asarray(self.max)), axis=1)


def backproject(u, v, z, cam: CameraModel) -> np.ndarray:
    """Pixel coordinates plus depth to world points (continuous ``u, v``)."""
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    cam_pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=-1)
    return cam.camera_to_world(cam_pts)


def project(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points to continuous pixel coordinates ``(u, v)`` and depth ``z``."""
    pc = cam.world_to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return u, v, z


def unproject(depth: np.ndarray, cam: CameraModel) -> PointCloud:
    """Lift every valid (non-zero) depth pixel to a world-frame point."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} != ({cam.height}, {cam.width})")
    vs, us = np.nonzero(depth > 0)
    return PointCloud(backproject(us, vs, depth[vs, us], cam))


def rasterize_depth(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Z-buffer render of points: nearest depth per pixel, 0 where empty."""
    u, v, z = project(points, cam)
    ui = np.rint(u)
    vi = np.rint(v)
    ok = (z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    buf = np.full(cam.height * cam.width, np.inf)
    flat = vi[ok].astype(np.intp) * cam.width + ui[ok].astype(np.intp)
    np.minimum.at(buf, flat, z[ok])
    buf[np.isinf(buf)] = 0.0
    return buf.reshape(cam.height, cam.width)


def crop(cloud: PointCloud, box: Aabb) -> PointCloud:
    """Keep points inside the closed box; order and colors follow along."""
    return cloud.select(np.nonzero(box.contains(cloud.points))[0])


def fps_indices(points: np.ndarray, m: int, first: int) -> np.ndarray:
    """Greedy farthest point sampling starting from index ``first``.

    Each new pick maximizes the distance to its nearest already-picked point;
    ties go to the lowest index. Returns ``arange(N)`` when ``m >= N``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if m < 1:
        raise ValueError("sample count must be at least 1")
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if m >= n:
        return np.arange(n)
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = first
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1), out=d2)
    return chosen


def fps(cloud: PointCloud, m: int, seed=None) -> PointCloud:
    """Farthest point subset of ``m`` points; the first pick is drawn from ``seed``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if m < 1:
        raise ValueError("sample count must be at least 1")
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    if m >= len(cloud):
        return cloud.select(np.arange(len(cloud)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    first = int(rng.integers(len(cloud)))
    return cloud.select(fps_indices(cloud.points, m, first))


def strip_color(cloud: PointCloud) -> PointCloud:
    return PointCloud(cloud.points.copy(), None)
