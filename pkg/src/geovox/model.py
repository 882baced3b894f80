"""Joint detection + radiance-field model and per-scene precomputation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import TrainConfig
from .detection import DetectionHead, HeadOutput, Targets, assign_targets
from .encoder import ImageEncoder, uniform_init_
from .geometry import GridSpec, image_rays
from .nerf import (ColorMLP, GeometryMLP, features_from_projection,
                   positional_encoding, project_to_views, ray_keep, render_rays)
from .opacity import CostVolumeNet, modulate_volume, opacity_transform, voxel_densities
from .scenes import SceneBundle
from .volume import (AugmentedVolume, VoxelProjection, depth_consistent, feature_dim,
                     project_grid, volume_from_maps)


@dataclass
class SceneCache:
    """Parameter-independent tensors for one scene."""

    bundle: SceneBundle
    images: torch.Tensor          # (V, 3, H, W) source images
    proj: VoxelProjection
    depth_valid: torch.Tensor     # (V, N) depth-consistent projections
    targets: Targets
    ray_origins: np.ndarray       # (R, 3) every pixel of every novel view
    ray_dirs: np.ndarray          # (R, 3)
    ray_rgb: torch.Tensor         # (R, 3)
    ray_depth: torch.Tensor       # (R,)

    @property
    def grid(self) -> GridSpec:
        return self.bundle.grid


def build_cache(bundle: SceneBundle, n_novel: Optional[int] = None,
                dtype=torch.float32) -> SceneCache:
    views = bundle.source_views
    images = torch.stack([torch.as_tensor(v.image).permute(2, 0, 1) for v in views]).to(dtype)
    proj = project_grid(views, bundle.grid)
    novel = bundle.novel_views[:n_novel]
    origins, dirs, rgb, depth = [], [], [], []
    for view, d in zip(novel, bundle.novel_depths):
        o, r = image_rays(view.intrinsics, view.pose)
        origins.append(o.reshape(-1, 3))
        dirs.append(r.reshape(-1, 3))
        rgb.append(np.asarray(view.image).reshape(-1, 3))
        depth.append(np.asarray(d).reshape(-1))
    if not novel:
        origins, dirs = [np.zeros((0, 3))], [np.zeros((0, 3))]
        rgb, depth = [np.zeros((0, 3))], [np.zeros(0)]
    return SceneCache(bundle, images, proj,
                      depth_consistent(proj, bundle.source_depths, bundle.grid),
                      assign_targets(bundle.grid, bundle.boxes),
                      np.concatenate(origins), np.concatenate(dirs),
                      torch.as_tensor(np.concatenate(rgb), dtype=dtype),
                      torch.as_tensor(np.concatenate(depth), dtype=dtype))


@dataclass
class DetectionForward:
    out: HeadOutput
    volume: AugmentedVolume
    weights: Optional[torch.Tensor]   # opacity / cost-volume probabilities, (nx, ny, nz)


@dataclass
class RayForward:
    color: torch.Tensor
    depth: torch.Tensor
    weight_sum: torch.Tensor
    keep: torch.Tensor
    empty_count: torch.Tensor


class GeoVoxModel(nn.Module):
    """All trainable parts; one parameter tree so a single store covers them.

    The geometry MLP ``gmlp`` is evaluated both on ray samples and at voxel
    centres. With ``share_gmlp`` off the detection branch gets its own copy.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        c = config.channels
        fdim = feature_dim(c, config.feature_set)
        pe_dim = 6 * config.pe_freqs
        self.encoder = ImageEncoder(c)
        uses_gmlp = config.geometry == "nerf-opacity"
        if uses_gmlp:
            self.gmlp = GeometryMLP(fdim, pe_dim, config.mlp_hidden)
            if config.nerf_enabled:
                self.cmlp = ColorMLP(config.mlp_hidden, config.mlp_hidden)
            if not config.share_gmlp and config.detection_branch:
                self.gmlp_det = GeometryMLP(fdim, pe_dim, config.mlp_hidden)
        if config.geometry == "cost-volume":
            self.cost = CostVolumeNet(c, config.cost_hidden)
        if config.detection_branch:
            head_in = c * (2 if config.modulate == "avg+var" else 1)
            self.head = DetectionHead(head_in, config.n_classes, config.neck_layers,
                                      config.neck_channels)

    def initialize(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        uniform_init_(self, gen)
        if hasattr(self, "head"):
            self.head.init_prior()

    @property
    def det_gmlp(self) -> Optional[GeometryMLP]:
        if hasattr(self, "gmlp_det"):
            return self.gmlp_det
        return getattr(self, "gmlp", None)

    def encode(self, cache: SceneCache) -> torch.Tensor:
        return self.encoder(cache.images)

    def volume(self, cache: SceneCache, fmaps: torch.Tensor) -> AugmentedVolume:
        cfg = self.config
        valid = cache.depth_valid if cfg.geometry == "gt-depth" else None
        return volume_from_maps(fmaps, cache.images, cache.proj, cache.grid, valid=valid,
                                rgb_resolution=cfg.rgb_resolution)

    def geometry_weights(self, vol: AugmentedVolume, grid: GridSpec) -> Optional[torch.Tensor]:
        cfg = self.config
        if cfg.geometry == "nerf-opacity":
            sigma = voxel_densities(vol, grid, self.det_gmlp, cfg.pe_freqs, cfg.feature_set)
            return opacity_transform(sigma)
        if cfg.geometry == "cost-volume":
            return self.cost(vol.v_var)
        return None

    def detect(self, cache: SceneCache, fmaps: torch.Tensor) -> DetectionForward:
        vol = self.volume(cache, fmaps)
        weights = self.geometry_weights(vol, cache.grid)
        feats = vol.v_avg
        if self.config.modulate == "avg+var":
            feats = torch.cat([feats, vol.v_var], dim=-1)
        if weights is not None:
            feats = modulate_volume(weights, feats)
        return DetectionForward(self.head(feats), vol, weights)

    # -- radiance branch ---------------------------------------------------

    def _point_features(self, cache: SceneCache, fmaps: torch.Tensor, points: np.ndarray,
                        vol: Optional[AugmentedVolume]):
        cfg = self.config
        if cfg.sample_source == "image":
            proj = project_to_views(points, cache.bundle.source_views)
            return features_from_projection(fmaps, cache.images, proj, cfg.feature_set,
                                            cfg.ray_interp)
        if vol is None:
            vol = self.volume(cache, fmaps)
        return sample_volume(vol, cache.grid, points, cfg.feature_set, fmaps.dtype)

    def render(self, cache: SceneCache, fmaps: torch.Tensor, origins: np.ndarray,
               dirs: np.ndarray, t_values: torch.Tensor, vol: Optional[AugmentedVolume] = None,
               drop_rays: bool = True) -> RayForward:
        """Render rays ``(R, 3)`` with sample distances ``(R, N)``.

        With ``drop_rays`` the MLPs only run on rays passing the empty-space
        rule; dropped rays get zero outputs and no gradient.
        """
        cfg = self.config
        n_rays, n = t_values.shape
        points = origins[:, None, :] + dirs[:, None, :] * t_values.double().numpy()[..., None]
        feats, count = self._point_features(cache, fmaps, points.reshape(-1, 3), vol)
        feats = feats.reshape(n_rays, n, -1)
        count = count.reshape(n_rays, n)
        empty_count = (count == 0).sum(-1)
        keep = (ray_keep(empty_count, n, cfg.max_empty_points) if drop_rays
                else torch.ones(n_rays, dtype=torch.bool))
        seen = (count > 0) & keep.unsqueeze(-1)
        dtype = fmaps.dtype
        pts = torch.as_tensor(points, dtype=dtype)
        enc = positional_encoding(pts[seen], cfg.pe_freqs, cache.grid)
        sigma_s, latent = self.gmlp(feats[seen], enc)
        d = torch.as_tensor(dirs, dtype=dtype).unsqueeze(1).expand(n_rays, n, 3)[seen]
        rgb_s = self.cmlp(latent, d)
        sigma = torch.zeros((n_rays, n), dtype=dtype).index_put(tuple(seen.nonzero().T), sigma_s)
        rgb = torch.zeros((n_rays, n, 3), dtype=dtype).index_put(tuple(seen.nonzero().T), rgb_s)
        delta = (cfg.far - cfg.near) / cfg.n_samples
        r = render_rays(sigma, rgb, t_values.to(dtype), delta)
        return RayForward(r.color, r.depth, r.weight_sum, keep, empty_count)


def sample_volume(vol: AugmentedVolume, grid: GridSpec, points: np.ndarray,
                  feature_set: str, dtype) -> tuple:
    """Trilinear lookup of augmented volume features at world points.

    Points outside the grid or surrounded by unobserved cells come back empty.
    """
    data = torch.cat([vol.augmented(feature_set), vol.m_p.unsqueeze(-1).to(vol.v_avg.dtype)], -1)
    data = data.permute(3, 2, 1, 0).unsqueeze(0)   # (1, D, nz, ny, nx)
    vs = np.asarray(grid.voxel_size)
    n = np.asarray(grid.shape, dtype=np.float64)
    idx = (np.asarray(points) - grid.lower) / vs - 0.5
    norm = 2 * idx / np.maximum(n - 1, 1) - 1
    g = torch.as_tensor(norm, dtype=data.dtype).reshape(1, -1, 1, 1, 3)
    out = F.grid_sample(data, g, mode="bilinear", padding_mode="zeros", align_corners=True)
    out = out[0, :, :, 0, 0].T
    return out[:, :-1].to(dtype), (out[:, -1] > 1e-6).long()
