"""Pinhole camera math.

Conventions used throughout the package:

* Extrinsics map world to camera: ``x_cam = R @ x_world + t``.
* Camera axes follow OpenCV: x right, y down, z forward.
* Pixel coordinates are pixel-centred: integer ``(u, v)`` is the centre of
  pixel column ``u`` / row ``v``, so pixel ``k`` covers ``[k - 0.5, k + 0.5)``.
* Voxel grids are anchored at their minimum corner; voxel ``(i, j, k)`` has its
  centre at ``origin + ((i, j, k) + 0.5) * voxel_size``. Flattened orderings
  put x fastest, then y, then z.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, downsample: int) -> "CameraIntrinsics":
        """Intrinsics of a feature map ``downsample`` times smaller.

        Focal lengths and principal point are divided exactly, so a pixel
        ``(u, v)`` maps to ``(u / s, v / s)``. Stride-2, padding-1 convolutions
        centre output cell ``k`` on input pixel ``2k``, which makes this the
        geometrically consistent choice for the encoder in this package.
        """
        if downsample < 1:
            raise ValueError("downsample must be a positive integer")
        s = float(downsample)
        return CameraIntrinsics(self.fx / s, self.fy / s, self.cx / s, self.cy / s,
                                self.width // downsample, self.height // downsample)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        """3x4 extrinsic matrix ``[R | t]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def inverse(self) -> "CameraPose":
        """Camera-to-world transform expressed in the same container."""
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray = field(repr=False)

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise ValueError(
                f"image shape {img.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}x3")


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")
        if min(self.voxel_size) <= 0:
            raise ValueError("voxel sizes must be positive")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(x) for x in self.voxel_size))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.shape, dtype=np.float64) * np.array(self.voxel_size)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extent

    def flat_index(self, i: int, j: int, k: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz):
            raise IndexError(f"cell {(i, j, k)} outside grid {self.shape}")
        return i + self.nx * (j + self.ny * k)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose,
                   downsample: int = 1):
    """Vectorised projection of world points.

    Returns ``(uv, depth, valid)`` with ``uv`` in the pixel frame of the
    ``downsample``-scaled map. ``valid`` requires positive depth and a
    pixel-centred position inside ``[-0.5, size - 0.5)`` on both axes.
    """
    K = intrinsics.scaled(downsample)
    cam = pose.world_to_camera(points)
    d = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / d + K.cx
        v = K.fy * cam[..., 1] / d + K.cy
    valid = ((d > 0) & (u >= -0.5) & (u < K.width - 0.5)
             & (v >= -0.5) & (v < K.height - 0.5))
    uv = np.nan_to_num(np.stack([u, v], axis=-1), nan=0.0, posinf=0.0, neginf=0.0)
    return uv, d, valid


def project_point(p, view: CameraView, downsample: int = 1):
    """Project a single world point into ``view``.

    Returns ``(u, v, d, valid)``; invalid projections are flagged rather than
    raising.
    """
    uv, d, valid = project_points(np.asarray(p, dtype=np.float64)[None], view.intrinsics,
                                  view.pose, downsample)
    return float(uv[0, 0]), float(uv[0, 1]), float(d[0]), bool(valid[0])


def pixel_directions(intrinsics: CameraIntrinsics, pose: CameraPose, u, v) -> np.ndarray:
    """Unit world-frame directions through pixel positions ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack([(u - intrinsics.cx) / intrinsics.fx,
                    (v - intrinsics.cy) / intrinsics.fy,
                    np.ones_like(u)], axis=-1)
    world = cam @ pose.rotation
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def pixel_to_ray(u: float, v: float, view: CameraView) -> Ray:
    K = view.intrinsics
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ValueError(f"pixel ({u}, {v}) outside image {K.width}x{K.height}")
    return Ray(view.pose.center, pixel_directions(K, view.pose, u, v))


def image_rays(intrinsics: CameraIntrinsics, pose: CameraPose):
    """Origins and directions for every pixel centre, shaped ``(H, W, 3)``."""
    v, u = np.meshgrid(np.arange(intrinsics.height, dtype=np.float64),
                       np.arange(intrinsics.width, dtype=np.float64), indexing="ij")
    dirs = pixel_directions(intrinsics, pose, u, v)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def voxel_centers(grid: GridSpec) -> np.ndarray:
    """World coordinates of all voxel centres, x fastest then y then z."""
    k, j, i = np.meshgrid(np.arange(grid.nz), np.arange(grid.ny), np.arange(grid.nx),
                          indexing="ij")
    idx = np.stack([i, j, k], axis=-1).reshape(-1, 3).astype(np.float64)
    return grid.lower + (idx + 0.5) * np.array(grid.voxel_size)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraPose(R, -R @ eye)
