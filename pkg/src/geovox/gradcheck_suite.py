"""Micro-instances for finite-difference gradient verification (float64)."""
from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np
import torch

from .autodiff import GradCheckReport, grad_check
from .config import TrainConfig
from .detection import Box3D, DetectionHead, assign_targets, detection_losses
from .encoder import ImageEncoder, uniform_init_
from .geometry import CameraIntrinsics, CameraView, GridSpec, look_at
from .nerf import (ColorMLP, GeometryMLP, features_from_projection, nerf_losses,
                   positional_encoding, project_to_views, render_rays, sample_t_values)
from .scenes import CameraRig, SceneConfig, make_bundle

DTYPE = torch.float64


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _perturb_biases(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.1) -> None:
    # nonzero biases keep ReLU pre-activations away from the kink at 0
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.add_(scale * torch.rand(p.shape, generator=gen, dtype=p.dtype))


def _micro_views(n_views: int = 2, size: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(6.0, 6.0, (size - 1) / 2, (size - 1) / 2, size, size)
    views = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views + 0.3
        eye = np.array([2.5 * np.cos(ang), 2.5 * np.sin(ang), 0.4])
        views.append(CameraView(K, look_at(eye, np.zeros(3)), rng.random((size, size, 3))))
    return views


def render_micro(seed: int = 0):
    """G-MLP + C-MLP + rendering + losses on 2 rays with 8 samples.

    Features come from a micro encoder on two 8x8 views so the check also
    covers the image-feature path. Returns ``(loss_fn, params)``.
    """
    gen = _gen(seed)
    views = _micro_views(seed=seed)
    images = torch.stack([torch.as_tensor(v.image).permute(2, 0, 1) for v in views]).to(DTYPE)
    enc = ImageEncoder(channels=3, hidden=3).to(DTYPE)
    feat_dim, pe_freqs = 2 * 3 + 6, 2
    gmlp = GeometryMLP(feat_dim, 6 * pe_freqs, hidden=8).to(DTYPE)
    cmlp = ColorMLP(8, hidden=8).to(DTYPE)
    for m in (enc, gmlp, cmlp):
        uniform_init_(m, gen)
        _perturb_biases(m, gen)
    origins = np.array([[0.0, -2.0, 0.1], [0.2, 2.0, -0.1]])
    dirs = np.array([[0.05, 1.0, 0.02], [-0.03, -1.0, 0.04]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    near, far, n = 0.5, 3.5, 8
    t = sample_t_values(2, near, far, n, "stratified", _gen(seed + 1), DTYPE)
    pts = origins[:, None] + dirs[:, None] * t.numpy()[..., None]
    proj = project_to_views(pts.reshape(-1, 3), views)
    grid = GridSpec(4, 4, 4, origin=(-2.0, -2.0, -2.0), voxel_size=(1.0, 1.0, 1.0))
    enc_pts = positional_encoding(torch.as_tensor(pts.reshape(-1, 3)), pe_freqs, grid)
    target_rgb = torch.rand((2, 3), generator=gen, dtype=DTYPE)
    target_depth = torch.tensor([1.7, 2.2], dtype=DTYPE)
    d = torch.as_tensor(dirs, dtype=DTYPE).repeat_interleave(n, 0)

    def loss_fn():
        fmaps = enc(images)
        feats, count = features_from_projection(fmaps, images, proj)
        sigma, latent = gmlp(feats, enc_pts)
        rgb = cmlp(latent, d)
        sigma = sigma * (count > 0)
        out = render_rays(sigma.reshape(2, n), rgb.reshape(2, n, 3), t, (far - near) / n)
        l_c, l_d, _ = nerf_losses(out.color, out.depth, target_rgb, target_depth)
        return l_c + l_d

    params = {}
    for prefix, m in (("encoder", enc), ("gmlp", gmlp), ("cmlp", cmlp)):
        params.update({f"{prefix}.{k}": p for k, p in m.named_parameters()})
    return loss_fn, params


def encoder_micro(seed: int = 0):
    gen = _gen(seed)
    enc = ImageEncoder(channels=4, hidden=3).to(DTYPE)
    uniform_init_(enc, gen)
    _perturb_biases(enc, gen)
    image = torch.rand((1, 3, 8, 12), generator=gen, dtype=DTYPE)
    proj = torch.randn((1, 4, 2, 3), generator=gen, dtype=DTYPE)

    def loss_fn():
        f = enc(image)
        return (f * proj).sum() + 0.5 * (f ** 2).sum()

    return loss_fn, dict(enc.named_parameters())


def detection_micro(seed: int = 0):
    gen = _gen(seed)
    grid = GridSpec(4, 4, 3, origin=(0.0, 0.0, 0.0), voxel_size=(0.5, 0.5, 0.5))
    head = DetectionHead(3, 2).to(DTYPE)
    uniform_init_(head, gen)
    feats = torch.rand((4, 4, 3, 3), generator=gen, dtype=DTYPE)
    boxes = [Box3D([0.7, 0.8, 0.6], [1.2, 1.0, 1.1], 0), Box3D([1.4, 1.5, 0.7], [0.9, 1.1, 0.8], 1)]
    targets = assign_targets(grid, boxes)

    def loss_fn():
        l_cls, l_cntr, l_loc = detection_losses(head(feats), targets)
        return l_cls + l_cntr + l_loc

    return loss_fn, dict(head.named_parameters())


def joint_micro(seed: int = 3):
    """Encoder -> volume -> opacity -> head plus a 2-ray NeRF batch, all parameters."""
    from .harness import _loss_terms, init_state
    from .model import build_cache

    cfg = TrainConfig(channels=2, mlp_hidden=8, pe_freqs=1, n_samples=8, rays_per_iter=2,
                      grid_nx=8, grid_ny=8, grid_nz=4, n_source_views=3, n_novel_views=2,
                      image_width=8, image_height=8, focal=4.0, n_classes=3, seed=seed)
    rig = CameraRig(width=8, height=8, focal=4.0, n_source=3, n_novel=2)
    bundle = make_bundle(seed, SceneConfig(), rig, cfg.grid_shape)
    cache = build_cache(bundle, 2, dtype=DTYPE)
    state = init_state(cfg)
    state.model.to(DTYPE)
    _perturb_biases(state.model, _gen(seed), 0.05)
    with torch.no_grad():
        # start with positive density so the rendering weights carry gradient
        state.model.gmlp.sigma.bias.add_(1.0)

    def loss_fn():
        state.ray_gen.manual_seed(seed)
        terms, _, _ = _loss_terms(state, cache, cfg)
        return sum(terms.values())

    return loss_fn, dict(state.model.named_parameters())


SUITE: Dict[str, Callable[[], Tuple[Callable, dict]]] = {
    "render": render_micro,
    "encoder": encoder_micro,
    "detection": detection_micro,
    "joint": joint_micro,
}


def run_suite(names=None, step: float = 1e-5, tolerance: float = 1e-4) -> Dict[str, GradCheckReport]:
    out = {}
    for name in names or SUITE:
        loss_fn, params = SUITE[name]()
        out[name] = grad_check(loss_fn, params, step=step, tolerance=tolerance)
    return out
