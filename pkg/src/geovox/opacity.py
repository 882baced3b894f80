"""Opacity field from the shared geometry MLP, and the sigmoid cost-volume baseline."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .geometry import GridSpec, voxel_centers
from .nerf import GeometryMLP, positional_encoding
from .volume import AugmentedVolume, flat_to_grid, grid_to_flat


def voxel_densities(vol: AugmentedVolume, grid: GridSpec, gmlp: GeometryMLP,
                    n_freqs: int = 10, feature_set: str = "avg+var+rgb") -> torch.Tensor:
    """Density at every voxel centre; cells seen by no view are forced to zero.

    Returns an ``(nx, ny, nz)`` tensor.
    """
    feats = grid_to_flat(vol.augmented(feature_set))
    m_p = grid_to_flat(vol.m_p)
    centers = torch.as_tensor(voxel_centers(grid), dtype=feats.dtype)
    seen = m_p > 0
    sigma = torch.zeros(grid.num_voxels, dtype=feats.dtype)
    if bool(seen.any()):
        enc = positional_encoding(centers[seen], n_freqs, grid)
        s, _ = gmlp(feats[seen], enc)
        sigma = sigma.index_put((seen.nonzero()[:, 0],), s)
    return flat_to_grid(sigma, grid)


def opacity_transform(sigma: torch.Tensor) -> torch.Tensor:
    """``alpha = 1 - exp(-sigma)``; the constant sample spacing is folded into sigma."""
    if bool((sigma < 0).any()):
        raise ValueError("densities must be non-negative")
    return -torch.expm1(-sigma)


def modulate_volume(alpha: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Broadcast ``(nx, ny, nz)`` weights over ``(nx, ny, nz, C)`` features."""
    if alpha.shape != features.shape[:3]:
        raise ValueError(f"shape mismatch {tuple(alpha.shape)} vs {tuple(features.shape)}")
    return alpha.unsqueeze(-1) * features


class CostVolumeNet(nn.Module):
    """Two 3D convolutions on the variance volume followed by a sigmoid."""

    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv3d(hidden, 1, 3, padding=1)

    def forward(self, v_var: torch.Tensor) -> torch.Tensor:
        x = v_var.permute(3, 0, 1, 2).unsqueeze(0)
        x = self.conv2(F.relu(self.conv1(x)))
        return torch.sigmoid(x)[0, 0]


def cost_volume_baseline(vol: AugmentedVolume, net: CostVolumeNet) -> torch.Tensor:
    return net(vol.v_var)
