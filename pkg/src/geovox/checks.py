"""Oracle checks on synthetic scenes that need no training."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
import torch

from .geometry import image_rays
from .metrics import roc_auc
from .nerf import project_to_views, render_rays, sample_t_values
from .scenes import SceneBundle, _slab
from .volume import view_statistics


def oracle_density(bundle: SceneBundle, origins: np.ndarray, dirs: np.ndarray,
                   near: float, far: float, n_samples: int, sigma: float = 50.0) -> torch.Tensor:
    """Density ``sigma`` on every sample bin that overlaps an object box, 0 elsewhere.

    Bin ``i`` spans ``[near + i delta, near + (i + 1) delta]``; painting whole
    bins (rather than testing the midpoint) makes the first opaque sample the
    one whose bin contains the surface.
    """
    delta = (far - near) / n_samples
    lo = near + delta * np.arange(n_samples)
    hi = lo + delta
    dens = np.zeros((len(origins), n_samples))
    for box in bundle.boxes:
        t_in, t_out, _ = _slab(origins, dirs, box.min, box.max)
        hit = (t_in <= t_out) & (t_out > 0)
        overlap = hit[:, None] & (t_in[:, None] <= hi) & (t_out[:, None] >= lo)
        dens[overlap] = sigma
    return torch.as_tensor(dens)


def oracle_depth_check(scenes: Sequence[SceneBundle], near: float = 0.2, far: float = 8.0,
                       n_samples: int = 64, sigma: float = 50.0) -> Dict[str, float]:
    """Render oracle densities and compare depth with the analytic intersection.

    Only pixels whose first hit is an object are scored. Returns the fraction
    within half a sample spacing and the worst error.
    """
    delta = (far - near) / n_samples
    errors = []
    for bundle in scenes:
        for view, depth in zip(bundle.novel_views, bundle.novel_depths):
            o, d = image_rays(view.intrinsics, view.pose)
            o, d = o.reshape(-1, 3), d.reshape(-1, 3)
            t_true = depth.reshape(-1)
            first_box = np.full(len(o), np.inf)
            for box in bundle.boxes:
                t_in, t_out, _ = _slab(o, d, box.min, box.max)
                first_box = np.where((t_in <= t_out) & (t_in > 0), np.minimum(first_box, t_in), first_box)
            on_object = np.isfinite(first_box) & (np.abs(first_box - t_true) < 1e-4)
            if not on_object.any():
                continue
            dens = oracle_density(bundle, o[on_object], d[on_object], near, far, n_samples, sigma)
            t = sample_t_values(int(on_object.sum()), near, far, n_samples, "deterministic",
                                dtype=torch.float64)
            rgb = torch.zeros((*dens.shape, 3), dtype=torch.float64)
            out = render_rays(dens, rgb, t, delta)
            errors.append(np.abs(out.depth.numpy() - t_true[on_object]))
    err = np.concatenate(errors)
    return {"fraction_within": float(np.mean(err <= delta / 2)), "max_error": float(err.max()),
            "n_rays": int(err.size), "tolerance": delta / 2}


def _voxel_keys(points: np.ndarray, lower: np.ndarray, size: float) -> np.ndarray:
    return np.floor((points - lower) / size).astype(np.int64)


def variance_prior_check(scenes: Sequence[SceneBundle], voxel_size: float = 0.05,
                         free_per_ray: int = 4, seed: int = 0) -> Dict[str, float]:
    """Multi-view RGB variance at surface voxels versus free-space voxels.

    Voxels live on a fine check grid of ``voxel_size`` covering the room.
    Surface voxels contain a back-projected source-view depth sample; free
    voxels contain a point strictly between a source camera and its first
    hit and no surface sample. Variance is measured at voxel centres over the
    source views that see them (at least two), summed over channels. The AUC
    ranks low variance as surface.
    """
    rng = np.random.default_rng(seed)
    surf_var, free_var = [], []
    for bundle in scenes:
        lower = bundle.spec.room_min
        surface, free = set(), set()
        for view, depth in zip(bundle.source_views, bundle.source_depths):
            o, d = image_rays(view.intrinsics, view.pose)
            o, d, t = o.reshape(-1, 3), d.reshape(-1, 3), depth.reshape(-1)
            surface.update(map(tuple, _voxel_keys(o + d * t[:, None], lower, voxel_size)))
            frac = rng.uniform(0.0, 1.0, (len(t), free_per_ray))
            pts = o[:, None] + d[:, None] * (t[:, None] * frac)[..., None]
            free.update(map(tuple, _voxel_keys(pts.reshape(-1, 3), lower, voxel_size)))
        free -= surface
        images = torch.stack([torch.as_tensor(v.image).permute(2, 0, 1)
                              for v in bundle.source_views]).to(torch.float64)
        fmaps = torch.zeros((len(images), 1, images.shape[2] // 4, images.shape[3] // 4),
                            dtype=torch.float64)
        for keys, out in ((surface, surf_var), (free, free_var)):
            centres = lower + (np.array(sorted(keys), dtype=np.float64) + 0.5) * voxel_size
            proj = project_to_views(centres, bundle.source_views)
            st = view_statistics(fmaps, images, proj.feat_uv, proj.image_uv, proj.valid, "nearest",
                                 with_var=False, with_rgb=True)
            seen = st["count"].numpy() >= 2
            out.append(st["rgb_var"].sum(-1).numpy()[seen])
    s, f = np.concatenate(surf_var), np.concatenate(free_var)
    scores = -np.concatenate([s, f])
    labels = np.concatenate([np.ones(s.size), np.zeros(f.size)])
    return {"surface_mean": float(s.mean()), "free_mean": float(f.mean()),
            "auc": roc_auc(scores, labels), "n_surface": int(s.size), "n_free": int(f.size)}
