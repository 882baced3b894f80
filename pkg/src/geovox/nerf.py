"""Generalizable radiance-field branch: ray sampling, feature gathering, MLPs,
volume rendering and photometric/depth losses."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoder import DOWNSAMPLE
from .geometry import CameraView, GridSpec, Ray, project_points
from .volume import FEATURE_SETS, view_statistics

MAX_EMPTY_POINTS = 8


def normalize_points(points: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Map world points to ``[-1, 1]`` over the grid extent."""
    lower = torch.as_tensor(grid.lower, dtype=points.dtype)
    extent = torch.as_tensor(grid.extent, dtype=points.dtype)
    return 2.0 * (points - lower) / extent - 1.0


def positional_encoding(p, n_freqs: int = 10, grid: Optional[GridSpec] = None) -> torch.Tensor:
    """Sinusoidal encoding, ``6 * n_freqs`` values for a 3-vector.

    Each coordinate contributes ``sin(2^k pi x), cos(2^k pi x)`` pairs for
    ``k = 0 .. n_freqs - 1``, coordinate by coordinate. When ``grid`` is given
    the points are first normalised to ``[-1, 1]`` over its extent.
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.float64)
    if grid is not None:
        p = normalize_points(p, grid)
    freqs = (2.0 ** torch.arange(n_freqs, dtype=p.dtype)) * math.pi
    angles = p.unsqueeze(-1) * freqs                         # (..., 3, L)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., 3, L, 2)
    return enc.reshape(*p.shape[:-1], 6 * n_freqs)


def sample_t_values(n_rays: int, near: float, far: float, n: int,
                    mode: str = "deterministic", generator: Optional[torch.Generator] = None,
                    dtype=torch.float32) -> torch.Tensor:
    """Sample distances along rays with one sample per equal-width bin.

    Returns ``(n_rays, n)`` strictly increasing values in ``[near, far]``; the
    spacing used for compositing is always ``(far - near) / n``.
    """
    if not (0 < near < far):
        raise ValueError(f"need 0 < near < far, got {near}, {far}")
    if n < 2:
        raise ValueError("need at least two samples per ray")
    delta = (far - near) / n
    edges = near + delta * torch.arange(n, dtype=torch.float64)
    if mode == "deterministic":
        offs = torch.full((n_rays, n), 0.5, dtype=torch.float64)
    elif mode == "stratified":
        offs = torch.rand((n_rays, n), generator=generator, dtype=torch.float64)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return (edges + offs * delta).to(dtype)


def sample_ray_points(ray: Ray, near: float, far: float, n: int,
                      mode: str = "deterministic", seed: Optional[int] = None) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return sample_t_values(1, near, far, n, mode, gen, torch.float64)[0].numpy()


@dataclass
class PointProjection:
    """Projections of ``P`` points into ``V`` source views (constant w.r.t. parameters)."""

    feat_uv: torch.Tensor   # (V, P, 2)
    image_uv: torch.Tensor  # (V, P, 2)
    valid: torch.Tensor     # (V, P)


def project_to_views(points: np.ndarray, views: Sequence[CameraView],
                     downsample: int = DOWNSAMPLE) -> PointProjection:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feat_uv, image_uv, valid = [], [], []
    for view in views:
        uv_f, _, ok = project_points(pts, view.intrinsics, view.pose, downsample)
        uv_i, _, _ = project_points(pts, view.intrinsics, view.pose, 1)
        feat_uv.append(uv_f)
        image_uv.append(uv_i)
        valid.append(ok)
    return PointProjection(torch.from_numpy(np.stack(feat_uv)),
                           torch.from_numpy(np.stack(image_uv)),
                           torch.from_numpy(np.stack(valid)))


def features_from_projection(fmaps: torch.Tensor, images: torch.Tensor, proj: PointProjection,
                             feature_set: str = "avg+var+rgb", interp: str = "bilinear"):
    """Augmented per-point features and effective view counts.

    Args:
        fmaps: ``(V, C, h, w)`` source feature maps.
        images: ``(V, 3, H, W)`` source images.

    Returns:
        ``(features (P, D), count (P,))``.
    """
    parts = FEATURE_SETS[feature_set]
    st = view_statistics(fmaps, images, proj.feat_uv, proj.image_uv, proj.valid, interp,
                         with_var="var" in parts, with_rgb="rgb" in parts)
    chunks = [st["v_avg"]]
    if "var" in parts:
        chunks.append(st["v_var"])
    if "rgb" in parts:
        chunks += [st["rgb_avg"], st["rgb_var"]]
    count = st["count"]
    return torch.cat(chunks, dim=-1), count


def gather_ray_features(points, views: Sequence[CameraView], fmaps: torch.Tensor,
                        feature_set: str = "avg+var+rgb", interp: str = "bilinear"):
    """Per-point augmented features for ``(R, N, 3)`` ray samples.

    Returns ``(features (R, N, D), count (R, N), empty_count (R,))`` where a
    point is empty when no source view sees it.
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    proj = project_to_views(points, views)
    images = torch.stack([torch.as_tensor(np.ascontiguousarray(v.image)).permute(2, 0, 1)
                          for v in views]).to(fmaps.dtype)
    feats, count = features_from_projection(fmaps, images, proj, feature_set, interp)
    feats = feats.reshape(*lead, -1)
    count = count.reshape(lead)
    return feats, count, (count == 0).sum(-1)


def ray_keep(empty_count, n_points: Optional[int] = None, max_empty: int = MAX_EMPTY_POINTS):
    """True for rays with at most ``max_empty`` samples in empty space."""
    if n_points is not None and np.any(np.asarray(empty_count) > n_points):
        raise ValueError("empty_count exceeds the number of samples")
    if isinstance(empty_count, torch.Tensor):
        return empty_count <= max_empty
    return np.asarray(empty_count) <= max_empty if np.ndim(empty_count) else bool(empty_count <= max_empty)


class GeometryMLP(nn.Module):
    """Density network: four hidden layers with the input re-injected at the third.

    Returns a non-negative density (ReLU) and the last hidden activation as the
    latent passed to the colour network.
    """

    def __init__(self, feat_dim: int, pe_dim: int, hidden: int = 256):
        super().__init__()
        in_dim = feat_dim + pe_dim
        self.feat_dim, self.pe_dim, self.hidden = feat_dim, pe_dim, hidden
        self.l1 = nn.Linear(in_dim, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.l3 = nn.Linear(hidden + in_dim, hidden)
        self.l4 = nn.Linear(hidden, hidden)
        self.sigma = nn.Linear(hidden, 1)

    def forward(self, feature: torch.Tensor, encoding: torch.Tensor):
        x = torch.cat([feature, encoding], dim=-1)
        h = F.relu(self.l1(x))
        h = F.relu(self.l2(h))
        h = F.relu(self.l3(torch.cat([h, x], dim=-1)))
        h = F.relu(self.l4(h))
        return F.relu(self.sigma(h)).squeeze(-1), h


class ColorMLP(nn.Module):
    """One hidden layer on ``[latent, direction]`` followed by a sigmoid RGB head."""

    def __init__(self, latent_dim: int = 256, hidden: int = 256):
        super().__init__()
        self.l1 = nn.Linear(latent_dim + 3, hidden)
        self.rgb = nn.Linear(hidden, 3)

    def forward(self, latent: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.l1(torch.cat([latent, direction.to(latent.dtype)], dim=-1)))
        return torch.sigmoid(self.rgb(h))


def g_mlp(feature, encoding, params: GeometryMLP):
    return params(feature, encoding)


def c_mlp(latent, direction, params: ColorMLP):
    return params(latent, direction)


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    weight_sum: torch.Tensor
    weights: torch.Tensor


def render_rays(sigma: torch.Tensor, colors: torch.Tensor, t_values: torch.Tensor,
                delta: float) -> RenderOutput:
    """Alpha-composite ``(..., N)`` densities and ``(..., N, 3)`` colours.

    ``T_i = exp(-sum_{j<i} sigma_j delta)``, ``alpha_i = 1 - exp(-sigma_i delta)``;
    colour and depth are the ``T_i alpha_i``-weighted sums (no normalisation).
    """
    tau = sigma * delta
    alpha = -torch.expm1(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    weights = trans * alpha
    color = (weights.unsqueeze(-1) * colors).sum(-2)
    depth = (weights * t_values).sum(-1)
    return RenderOutput(color, depth, weights.sum(-1), weights)


def render_ray(sigma, colors, t_values, delta: float) -> RenderOutput:
    """Single-ray convenience wrapper around :func:`render_rays`."""
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    return render_rays(sigma, torch.as_tensor(colors, dtype=sigma.dtype),
                       torch.as_tensor(t_values, dtype=sigma.dtype), delta)


def transmittance(sigma: torch.Tensor, delta: float) -> torch.Tensor:
    """``T_1 .. T_{N+1}`` along the last axis."""
    acc = torch.cumsum(sigma * delta, dim=-1)
    return torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc], dim=-1))


def nerf_losses(color: torch.Tensor, depth: torch.Tensor, target_color: torch.Tensor,
                target_depth: torch.Tensor, keep: Optional[torch.Tensor] = None,
                use_photo: bool = True, use_depth: bool = True):
    """Photometric and depth losses over the kept rays.

    ``L_c`` is the mean squared colour error (summed over channels) per ray and
    ``L_d`` the mean absolute depth error. Returns ``(L_c, L_d, empty)`` where
    ``empty`` flags a batch with no kept ray (both losses are then zero).
    """
    if keep is None:
        keep = torch.ones(depth.shape, dtype=torch.bool)
    zero = color.sum() * 0.0
    n = int(keep.sum())
    if n == 0:
        warnings.warn("no rays kept; NeRF losses are zero", RuntimeWarning)
        return zero, zero, True
    target_color = target_color.to(color.dtype)
    target_depth = target_depth.to(depth.dtype)
    l_c = ((color[keep] - target_color[keep]) ** 2).sum(-1).mean() if use_photo else zero
    l_d = (depth[keep] - target_depth[keep]).abs().mean() if use_depth else zero
    return l_c, l_d, False
