"""Scatter multi-view image features into a voxel grid and aggregate them.

Tensors laid out per voxel use the grid's flat ordering (x fastest, then y,
then z) internally; the dataclasses expose ``(nx, ny, nz, C)`` views.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import DOWNSAMPLE
from .geometry import CameraView, GridSpec, project_points, voxel_centers

FEATURE_SETS = {
    "avg": ("avg",),
    "avg+var": ("avg", "var"),
    "avg+var+rgb": ("avg", "var", "rgb"),
}


def feature_dim(channels: int, feature_set: str = "avg+var+rgb") -> int:
    parts = FEATURE_SETS[feature_set]
    return (channels * (("avg" in parts) + ("var" in parts))
            + 6 * ("rgb" in parts))


def flat_to_grid(x: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """``(N, ...)`` in flat order to ``(nx, ny, nz, ...)``."""
    rest = x.shape[1:]
    x = x.reshape(grid.nz, grid.ny, grid.nx, *rest)
    return x.permute(2, 1, 0, *range(3, 3 + len(rest)))


def grid_to_flat(x: torch.Tensor) -> torch.Tensor:
    """``(nx, ny, nz, ...)`` to ``(N, ...)`` in flat order."""
    rest = x.shape[3:]
    return x.permute(2, 1, 0, *range(3, 3 + len(rest))).reshape(-1, *rest)


def sample_nearest(fmap: torch.Tensor, uv) -> torch.Tensor:
    """Nearest-neighbour lookup in a ``(C, h, w)`` map; halves round up.

    Out-of-range positions are clamped; callers mask them with the validity flag.
    """
    uv = torch.as_tensor(uv)
    _, h, w = fmap.shape
    col = torch.floor(uv[..., 0] + 0.5).long().clamp(0, w - 1)
    row = torch.floor(uv[..., 1] + 0.5).long().clamp(0, h - 1)
    return fmap[:, row, col].movedim(0, -1)


def sample_bilinear(fmap: torch.Tensor, uv) -> torch.Tensor:
    """Bilinear lookup in a ``(C, h, w)`` map at pixel-centred positions ``uv``.

    Integer coordinates hit pixel centres exactly; positions past the outer
    centres use the border value.
    """
    uv = torch.as_tensor(uv, dtype=fmap.dtype)
    _, h, w = fmap.shape
    shape = uv.shape[:-1]
    gx = 2.0 * uv[..., 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * uv[..., 1] / max(h - 1, 1) - 1.0
    g = torch.stack([gx, gy], dim=-1).reshape(1, 1, -1, 2)
    out = F.grid_sample(fmap[None], g, mode="bilinear", padding_mode="border",
                        align_corners=True)
    return out[0, :, 0].T.reshape(*shape, fmap.shape[0])


def sample_views(maps: torch.Tensor, uv, mode: str = "bilinear") -> torch.Tensor:
    """Sample ``(V, C, h, w)`` maps at per-view positions ``(V, P, 2)`` -> ``(V, P, C)``."""
    uv = torch.as_tensor(uv, dtype=maps.dtype)
    _, c, h, w = maps.shape
    if mode == "nearest":
        col = torch.floor(uv[..., 0] + 0.5).long().clamp(0, w - 1)
        row = torch.floor(uv[..., 1] + 0.5).long().clamp(0, h - 1)
        flat = maps.reshape(maps.shape[0], c, h * w)
        idx = (row * w + col).unsqueeze(1).expand(-1, c, -1)
        return torch.gather(flat, 2, idx).transpose(1, 2)
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    gx = 2.0 * uv[..., 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * uv[..., 1] / max(h - 1, 1) - 1.0
    g = torch.stack([gx, gy], dim=-1).unsqueeze(1)
    out = F.grid_sample(maps, g, mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, :, 0].transpose(1, 2)


def sample_pairs(maps: torch.Tensor, uv: torch.Tensor, view_idx: torch.Tensor,
                 point_idx: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Sample only the listed ``(view, point)`` pairs of ``(V, C, h, w)`` maps.

    Same conventions as :func:`sample_views` (border clamping, pixel centres
    at integers) but the work scales with the number of pairs. Returns
    ``(n_pairs, C)``.
    """
    _, c, h, w = maps.shape
    flat = maps.permute(0, 2, 3, 1).reshape(-1, c)
    u = uv[view_idx, point_idx].to(maps.dtype)
    base = view_idx * (h * w)
    if mode == "nearest":
        col = torch.floor(u[:, 0] + 0.5).long().clamp(0, w - 1)
        row = torch.floor(u[:, 1] + 0.5).long().clamp(0, h - 1)
        return flat.index_select(0, base + row * w + col)
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    x = u[:, 0].clamp(0, w - 1)
    y = u[:, 1].clamp(0, h - 1)
    x0 = x.floor().clamp(max=max(w - 2, 0))
    y0 = y.floor().clamp(max=max(h - 2, 0))
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    i00 = base + y0.long() * w + x0.long()
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    take = lambda i: flat.index_select(0, i)
    top = torch.lerp(take(i00), take(i00 + dx), fx)
    bottom = torch.lerp(take(i00 + dy), take(i00 + dy + dx), fx)
    return torch.lerp(top, bottom, fy)


def pooled_mean_var(values: torch.Tensor, point_idx: torch.Tensor, n_points: int):
    """Per-point mean and population variance of pair samples ``(n_pairs, C)``.

    Pairs are accumulated in the order given (view-major from ``nonzero``),
    so results do not depend on threading.
    """
    count = torch.bincount(point_idx, minlength=n_points)
    denom = count.clamp(min=1).to(values.dtype).unsqueeze(-1)
    zeros = values.new_zeros((n_points, values.shape[-1]))
    mean = zeros.index_add(0, point_idx, values) / denom
    var = zeros.index_add(0, point_idx, (values - mean.index_select(0, point_idx)).square()) / denom
    return mean, var, count


def view_statistics(fmaps: torch.Tensor, images: torch.Tensor, feat_uv, image_uv,
                    valid: torch.Tensor, interp: str = "bilinear", with_var: bool = True,
                    with_rgb: bool = True, rgb_maps: Optional[torch.Tensor] = None,
                    rgb_uv=None, rgb_interp: str = "bilinear"):
    """Feature and colour statistics over the views where each point is valid.

    Returns ``dict`` with ``v_avg``, ``v_var``, ``rgb_avg``, ``rgb_var`` (``(P, .)``
    each, omitted parts absent) and ``count`` ``(P,)``.
    """
    n_points = valid.shape[1]
    vi, pi = valid.nonzero(as_tuple=True)
    feats = sample_pairs(fmaps, torch.as_tensor(feat_uv), vi, pi, interp)
    out = {}
    out["v_avg"], v_var, out["count"] = pooled_mean_var(feats, pi, n_points)
    if with_var:
        out["v_var"] = v_var
    if with_rgb:
        maps = images if rgb_maps is None else rgb_maps
        uv = image_uv if rgb_uv is None else rgb_uv
        rgb = sample_pairs(maps.to(fmaps.dtype), torch.as_tensor(uv), vi, pi, rgb_interp)
        out["rgb_avg"], out["rgb_var"], _ = pooled_mean_var(rgb, pi, n_points)
    return out


def sample_map(fmap: torch.Tensor, uv, mode: str) -> torch.Tensor:
    if mode == "nearest":
        return sample_nearest(fmap, uv)
    if mode == "bilinear":
        return sample_bilinear(fmap, uv)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def image_tensor(view: CameraView, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(view.image), dtype=dtype).permute(2, 0, 1)


def masked_mean_var(values: torch.Tensor, valid: torch.Tensor):
    """Mean and population variance over the leading (view) axis.

    Args:
        values: ``(V, ..., C)`` samples.
        valid: ``(V, ...)`` boolean mask of effective samples.

    Returns:
        ``(mean, var, count)``; cells with no effective sample are zero.
        Views are summed in index order.
    """
    w = valid.to(values.dtype).unsqueeze(-1)
    count = valid.sum(0)
    denom = count.clamp(min=1).to(values.dtype).unsqueeze(-1)
    mean = (values * w).sum(0) / denom
    var = (((values - mean) ** 2) * w).sum(0) / denom
    return mean, var, count


@dataclass
class ViewVolume:
    """One view's scattered features; invalid cells hold zeros."""

    data: torch.Tensor
    valid: torch.Tensor
    key: Tuple[float, ...] = field(default=(), compare=False)


@dataclass
class AugmentedVolume:
    v_avg: torch.Tensor
    v_var: torch.Tensor
    rgb_avg: torch.Tensor
    rgb_var: torch.Tensor
    m_p: torch.Tensor

    @property
    def shape(self):
        return tuple(self.m_p.shape)

    @property
    def channels(self) -> int:
        return self.v_avg.shape[-1]

    def augmented(self, feature_set: str = "avg+var+rgb") -> torch.Tensor:
        """Concatenate the selected statistics along the last axis.

        Order is fixed: ``v_avg, v_var, rgb_avg, rgb_var``.
        """
        parts = FEATURE_SETS[feature_set]
        chunks = []
        if "avg" in parts:
            chunks.append(self.v_avg)
        if "var" in parts:
            chunks.append(self.v_var)
        if "rgb" in parts:
            chunks += [self.rgb_avg, self.rgb_var]
        return torch.cat(chunks, dim=-1)

    @classmethod
    def from_flat(cls, grid: GridSpec, v_avg, v_var, rgb_avg, rgb_var, m_p):
        return cls(*(flat_to_grid(x, grid) for x in (v_avg, v_var, rgb_avg, rgb_var, m_p)))


def _view_key(view: CameraView) -> Tuple[float, ...]:
    K = view.intrinsics
    return tuple(view.pose.matrix.ravel().tolist()) + (K.fx, K.fy, K.cx, K.cy)


def build_view_volume(view: CameraView, fmap: torch.Tensor, grid: GridSpec,
                      interp: str = "nearest") -> ViewVolume:
    """Scatter one ``(C, h, w)`` feature map into the grid."""
    ds = view.intrinsics.width // fmap.shape[-1]
    uv, _, valid = project_points(voxel_centers(grid), view.intrinsics, view.pose, ds)
    valid_t = torch.from_numpy(valid)
    feats = sample_map(fmap, torch.from_numpy(uv).to(fmap.dtype), interp)
    feats = feats * valid_t.unsqueeze(-1).to(feats.dtype)
    return ViewVolume(flat_to_grid(feats, grid), flat_to_grid(valid_t, grid), _view_key(view))


def build_rgb_volume(view: CameraView, grid: GridSpec, downsample: int = DOWNSAMPLE,
                     dtype=torch.float64) -> ViewVolume:
    """Scatter raw pixel colours, sampled bilinearly at full resolution.

    Validity follows the feature-map bounds so it matches the feature volume.
    """
    centers = voxel_centers(grid)
    _, _, valid = project_points(centers, view.intrinsics, view.pose, downsample)
    uv, _, _ = project_points(centers, view.intrinsics, view.pose, 1)
    valid_t = torch.from_numpy(valid)
    rgb = sample_bilinear(image_tensor(view, dtype), torch.from_numpy(uv))
    rgb = rgb * valid_t.unsqueeze(-1).to(dtype)
    return ViewVolume(flat_to_grid(rgb, grid), flat_to_grid(valid_t, grid), _view_key(view))


def _canonical(volumes: Sequence[ViewVolume]):
    def key(item):
        i, vol = item
        return vol.key if vol.key else (hash(vol.data.detach().numpy().tobytes()),)
    return [v for _, v in sorted(enumerate(volumes), key=key)]


def aggregate(view_volumes: Sequence[ViewVolume],
              rgb_volumes: Sequence[ViewVolume]) -> AugmentedVolume:
    """Mean/variance statistics over the effective views of every cell.

    Volumes are reduced in a canonical order (sorted by camera key), so any
    permutation of the inputs gives bit-identical results.
    """
    if not view_volumes:
        raise ValueError("aggregate needs at least one view")
    view_volumes = _canonical(view_volumes)
    rgb_volumes = _canonical(rgb_volumes)
    feats = torch.stack([v.data for v in view_volumes])
    valid = torch.stack([v.valid for v in view_volumes])
    rgb = torch.stack([v.data for v in rgb_volumes]).to(feats.dtype)
    rgb_valid = torch.stack([v.valid for v in rgb_volumes])
    v_avg, v_var, m_p = masked_mean_var(feats, valid)
    rgb_avg, rgb_var, _ = masked_mean_var(rgb, rgb_valid)
    return AugmentedVolume(v_avg, v_var, rgb_avg, rgb_var, m_p)


def augment_cell(vol: AugmentedVolume, index, feature_set: str = "avg+var+rgb") -> torch.Tensor:
    i, j, k = index
    nx, ny, nz = vol.shape
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise IndexError(f"cell {tuple(index)} outside volume {vol.shape}")
    return vol.augmented(feature_set)[i, j, k]


@dataclass
class VoxelProjection:
    """Precomputed voxel-to-view correspondences for a fixed camera set.

    Attributes:
        feat_uv: ``(V, N, 2)`` positions on the feature map.
        image_uv: ``(V, N, 2)`` positions on the full-resolution image.
        valid: ``(V, N)`` effective projections.
        distance: ``(V, N)`` Euclidean distance from each camera centre.
    """

    feat_uv: torch.Tensor
    image_uv: torch.Tensor
    valid: torch.Tensor
    distance: torch.Tensor


def project_grid(views: Sequence[CameraView], grid: GridSpec,
                 downsample: int = DOWNSAMPLE) -> VoxelProjection:
    centers = voxel_centers(grid)
    feat_uv, image_uv, valid, dist = [], [], [], []
    for view in views:
        uv_f, _, ok = project_points(centers, view.intrinsics, view.pose, downsample)
        uv_i, _, _ = project_points(centers, view.intrinsics, view.pose, 1)
        feat_uv.append(uv_f)
        image_uv.append(uv_i)
        valid.append(ok)
        dist.append(np.linalg.norm(centers - view.pose.center, axis=-1))
    return VoxelProjection(torch.from_numpy(np.stack(feat_uv)),
                           torch.from_numpy(np.stack(image_uv)),
                           torch.from_numpy(np.stack(valid)),
                           torch.from_numpy(np.stack(dist)))


def depth_consistent(proj: VoxelProjection, depth_maps: Sequence[np.ndarray],
                     grid: GridSpec) -> torch.Tensor:
    """Mask of projections whose voxel lies on the depth-map surface.

    A voxel counts if its distance to the camera matches the depth (ray
    distance) at the nearest full-resolution pixel within half a voxel
    diagonal.
    """
    tol = 0.5 * float(np.linalg.norm(grid.voxel_size))
    out = torch.zeros_like(proj.valid)
    for i, depth in enumerate(depth_maps):
        d = torch.as_tensor(np.asarray(depth, dtype=np.float64))[None]
        ref = sample_nearest(d, proj.image_uv[i])[..., 0]
        out[i] = proj.valid[i] & ((proj.distance[i] - ref).abs() <= tol)
    return out


def volume_from_maps(fmaps: torch.Tensor, images: torch.Tensor, proj: VoxelProjection,
                     grid: GridSpec, valid: Optional[torch.Tensor] = None,
                     interp: str = "nearest", rgb_resolution: str = "full") -> AugmentedVolume:
    """Differentiable volume construction from stacked maps.

    Args:
        fmaps: ``(V, C, h, w)`` feature maps.
        images: ``(V, 3, H, W)`` source images.
        proj: voxel projections for the same views.
        valid: optional override of ``proj.valid`` (e.g. depth-consistent mask).
        rgb_resolution: ``"full"`` samples RGB bilinearly from the images;
            ``"feature"`` samples a 4x average-pooled image like the features.
    """
    valid = proj.valid if valid is None else valid
    if rgb_resolution == "full":
        rgb_maps, rgb_uv, rgb_interp = images, proj.image_uv, "bilinear"
    elif rgb_resolution == "feature":
        rgb_maps, rgb_uv, rgb_interp = F.avg_pool2d(images, DOWNSAMPLE), proj.feat_uv, interp
    else:
        raise ValueError(f"unknown rgb_resolution {rgb_resolution!r}")
    st = view_statistics(fmaps, images, proj.feat_uv, proj.image_uv, valid, interp,
                         rgb_maps=rgb_maps, rgb_uv=rgb_uv, rgb_interp=rgb_interp)
    v_avg, v_var, rgb_avg, rgb_var, m_p = (st[k] for k in ("v_avg", "v_var", "rgb_avg", "rgb_var", "count"))
    return AugmentedVolume.from_flat(grid, v_avg, v_var, rgb_avg, rgb_var, m_p)


def build_augmented_volume(views: Sequence[CameraView], fmaps: torch.Tensor, grid: GridSpec,
                           interp: str = "nearest", rgb_resolution: str = "full") -> AugmentedVolume:
    images = torch.stack([image_tensor(v, fmaps.dtype) for v in views])
    return volume_from_maps(fmaps, images, project_grid(views, grid), grid,
                            interp=interp, rgb_resolution=rgb_resolution)


def build_gt_depth_volume(views: Sequence[CameraView], fmaps: torch.Tensor, grid: GridSpec,
                          depth_maps: Sequence[np.ndarray]) -> AugmentedVolume:
    """Volume where each view only feeds voxels on its depth-map surface."""
    if len(depth_maps) != len(views):
        raise ValueError("need one depth map per view")
    proj = project_grid(views, grid)
    images = torch.stack([image_tensor(v, fmaps.dtype) for v in views])
    return volume_from_maps(fmaps, images, proj, grid,
                            valid=depth_consistent(proj, depth_maps, grid))
