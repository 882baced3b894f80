"""Training loop, evaluation, ablation suites and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .autodiff import ParameterStore, backward
from .config import TrainConfig
from .detection import Box3D, decode_and_nms, detection_losses, eval_map
from .metrics import psnr, rmse, roc_auc, ssim
from .model import GeoVoxModel, SceneCache, build_cache
from .nerf import nerf_losses, sample_t_values
from .scenes import CameraRig, SceneBundle, make_bundle

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_cls", "L_cntr", "L_loc", "L_c", "L_d")


@dataclass
class LossReport:
    L_cls: float = 0.0
    L_cntr: float = 0.0
    L_loc: float = 0.0
    L_c: float = 0.0
    L_d: float = 0.0
    total: float = 0.0
    kept_rays: int = 0
    n_rays: int = 0

    def components(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_NAMES}

    def component_sum(self) -> float:
        return math.fsum(self.components().values())


@dataclass
class TrainState:
    model: GeoVoxModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    ray_gen: torch.Generator
    iteration: int = 0
    history: List[LossReport] = field(default_factory=list)

    @property
    def store(self) -> ParameterStore:
        return ParameterStore(self.model)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)
    # NaN-filling fresh buffers only guards against reading uninitialised
    # memory, which we never do, and costs a full pass over every allocation.
    torch.utils.deterministic.fill_uninitialized_memory = False
    torch.set_num_threads(1 if flag else torch.get_num_threads())


def lr_milestones(config: TrainConfig) -> List[int]:
    return sorted({max(1, int(round(f * config.iterations))) for f in config.lr_milestones})


def init_state(config: TrainConfig) -> TrainState:
    model = GeoVoxModel(config)
    model.initialize(config.stream_seed("init"))
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, lr_milestones(config), config.lr_gamma)
    gen = torch.Generator().manual_seed(config.stream_seed("ray"))
    return TrainState(model, opt, sched, gen)


def scene_seeds(config: TrainConfig):
    """Disjoint training and held-out scene seeds drawn from the scene stream."""
    rng = np.random.default_rng(config.stream_seed("scene"))
    total = config.n_train_scenes + config.n_eval_scenes
    seeds = rng.choice(2 ** 31 - 1, size=total, replace=False)
    return [int(s) for s in seeds[:config.n_train_scenes]], [int(s) for s in seeds[config.n_train_scenes:]]


def rig_for(config: TrainConfig) -> CameraRig:
    return CameraRig(width=config.image_width, height=config.image_height, focal=config.focal,
                     n_source=config.n_source_views, n_novel=config.n_novel_views)


def make_scenes(config: TrainConfig, which: str = "train") -> List[SceneBundle]:
    train, held = scene_seeds(config)
    seeds = train if which == "train" else held
    rig = rig_for(config)
    return [make_bundle(s, rig=rig, grid_shape=config.grid_shape, shading=config.shading)
            for s in seeds]


def _loss_terms(state: TrainState, cache: SceneCache, config: TrainConfig):
    model = state.model
    fmaps = model.encode(cache)
    zero = fmaps.sum() * 0.0
    terms = dict.fromkeys(LOSS_NAMES, zero)
    kept = n_rays = 0
    if config.detection_branch:
        det = model.detect(cache, fmaps)
        terms["L_cls"], terms["L_cntr"], terms["L_loc"] = detection_losses(det.out, cache.targets)
    if config.nerf_enabled:
        n_total = cache.ray_origins.shape[0]
        n_rays = min(config.rays_per_iter, n_total)
        idx = torch.randperm(n_total, generator=state.ray_gen)[:n_rays].numpy()
        t = sample_t_values(n_rays, config.near, config.far, config.n_samples, config.sampling,
                            state.ray_gen, fmaps.dtype)
        out = model.render(cache, fmaps, cache.ray_origins[idx], cache.ray_dirs[idx], t)
        l_c, l_d, _ = nerf_losses(out.color, out.depth, cache.ray_rgb[idx], cache.ray_depth[idx],
                                  out.keep, config.photo_loss, config.depth_loss)
        terms["L_c"], terms["L_d"] = l_c, l_d
        kept = int(out.keep.sum())
    return terms, kept, n_rays


def train_step(state: TrainState, cache: SceneCache, config: TrainConfig) -> LossReport:
    """One forward, one backward and one optimiser update on a single scene.

    The total is accumulated in float64 so the reported value is the exact
    float sum of the reported components.
    """
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    terms, kept, n_rays = _loss_terms(state, cache, config)
    total = torch.zeros((), dtype=torch.float64)
    for k in LOSS_NAMES:
        total = total + terms[k].double()
    backward(total, terms)
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.scheduler.step()
    state.iteration += 1
    values = {k: float(terms[k].detach().double()) for k in LOSS_NAMES}
    report = LossReport(**values, total=float(total.detach()), kept_rays=kept, n_rays=n_rays)
    state.history.append(report)
    return report


def train(config: TrainConfig, scenes: Optional[Sequence[SceneBundle]] = None,
          state: Optional[TrainState] = None, callback=None) -> TrainState:
    """Run ``config.iterations`` steps cycling through shuffled training scenes."""
    if config.deterministic:
        set_deterministic(True)
    scenes = make_scenes(config, "train") if scenes is None else scenes
    caches = [build_cache(s, config.n_novel_views) for s in scenes]
    state = init_state(config) if state is None else state
    order: List[int] = []
    t0 = time.perf_counter()
    while state.iteration < config.iterations:
        if not order:
            order = torch.randperm(len(caches), generator=state.ray_gen).tolist()
        report = train_step(state, caches[order.pop()], config)
        if config.log_every and state.iteration % config.log_every == 0:
            log.info("iter %d total %.4f (%s) %.1fs", state.iteration, report.total,
                     " ".join(f"{k}={v:.4f}" for k, v in report.components().items()),
                     time.perf_counter() - t0)
        if callback is not None:
            callback(state, report)
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@torch.no_grad()
def render_view(model: GeoVoxModel, cache: SceneCache, fmaps: torch.Tensor, view_index: int,
                config: TrainConfig):
    """Render novel view ``view_index``; returns ``(image HxWx3, depth HxW)`` arrays."""
    view = cache.bundle.novel_views[view_index]
    h, w = view.intrinsics.height, view.intrinsics.width
    start = view_index * h * w
    origins = cache.ray_origins[start:start + h * w]
    dirs = cache.ray_dirs[start:start + h * w]
    vol = model.volume(cache, fmaps) if config.sample_source == "volume" else None
    colors, depths = [], []
    for s in range(0, h * w, config.eval_chunk):
        o, d = origins[s:s + config.eval_chunk], dirs[s:s + config.eval_chunk]
        t = sample_t_values(len(o), config.near, config.far, config.n_samples, "deterministic",
                            dtype=fmaps.dtype)
        out = model.render(cache, fmaps, o, d, t, vol=vol, drop_rays=False)
        colors.append(out.color)
        depths.append(out.depth)
    image = torch.cat(colors).double().numpy().reshape(h, w, 3)
    depth = torch.cat(depths).double().numpy().reshape(h, w)
    return image, depth


@torch.no_grad()
def evaluate_nvs(model: GeoVoxModel, scenes: Sequence, config: TrainConfig,
                 n_novel: Optional[int] = None) -> Dict[str, float]:
    """PSNR / SSIM / depth RMSE averaged per scene, then over scenes."""
    model.eval()
    per_scene = []
    for scene in scenes:
        cache = scene if isinstance(scene, SceneCache) else build_cache(scene, config.n_novel_views)
        fmaps = model.encode(cache)
        n = len(cache.bundle.novel_views) if n_novel is None else min(n_novel, len(cache.bundle.novel_views))
        rows = []
        for i in range(n):
            img, dep = render_view(model, cache, fmaps, i, config)
            gt = cache.bundle.novel_views[i].image
            rows.append((psnr(img, gt, cap=config.psnr_cap), ssim(np.clip(img, 0, 1), gt),
                         rmse(dep, cache.bundle.novel_depths[i])))
        per_scene.append(np.mean(rows, axis=0))
    m = np.mean(per_scene, axis=0)
    return {"psnr": float(m[0]), "ssim": float(m[1]), "rmse": float(m[2])}


@torch.no_grad()
def predict_boxes(model: GeoVoxModel, cache: SceneCache, config: TrainConfig) -> List[Box3D]:
    fmaps = model.encode(cache)
    det = model.detect(cache, fmaps)
    return decode_and_nms(det.out, cache.grid, config.score_thresh, config.nms_iou)


@torch.no_grad()
def evaluate_detection(model: GeoVoxModel, scenes: Sequence, config: TrainConfig) -> Dict[str, float]:
    model.eval()
    caches = [s if isinstance(s, SceneCache) else build_cache(s, 0) for s in scenes]
    preds = [predict_boxes(model, c, config) for c in caches]
    res = eval_map(preds, [c.bundle.boxes for c in caches])
    return {"map25": res[0.25], "map50": res[0.5]}


@torch.no_grad()
def opacity_field(model: GeoVoxModel, cache: SceneCache):
    """Geometry weights ``(nx, ny, nz)`` and observation counts; ``None`` weights in ``none`` mode."""
    fmaps = model.encode(cache)
    vol = model.volume(cache, fmaps)
    w = model.geometry_weights(vol, cache.grid)
    return (None if w is None else w.double().numpy()), vol.m_p.numpy()


@torch.no_grad()
def evaluate_opacity(model: GeoVoxModel, scenes: Sequence, config: TrainConfig) -> Dict[str, float]:
    """Opacity vs oracle occupancy over voxels seen by at least one view.

    ``opacity_auc`` ranks by the raw opacity; ``opacity_auc_binary`` ranks by
    the 0.5-thresholded field, which equals its balanced accuracy.
    """
    model.eval()
    scores, labels = [], []
    for s in scenes:
        cache = s if isinstance(s, SceneCache) else build_cache(s, 0)
        w, m_p = opacity_field(model, cache)
        if w is None:
            return {"opacity_auc": float("nan"), "opacity_auc_binary": float("nan")}
        seen = m_p >= 1
        scores.append(w[seen])
        labels.append(cache.bundle.occupancy[seen])
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    return {"opacity_auc": roc_auc(scores, labels),
            "opacity_auc_binary": roc_auc((scores >= 0.5).astype(float), labels)}


def evaluate_all(model: GeoVoxModel, scenes: Sequence, config: TrainConfig) -> Dict[str, float]:
    caches = [s if isinstance(s, SceneCache) else build_cache(s, config.n_novel_views) for s in scenes]
    out: Dict[str, float] = {}
    if config.detection_branch:
        out.update(evaluate_detection(model, caches, config))
    if config.nerf_enabled:
        out.update(evaluate_nvs(model, caches, config))
    if config.geometry in ("nerf-opacity", "cost-volume"):
        out.update(evaluate_opacity(model, caches, config))
    return out


def write_metrics_csv(metrics: Dict[str, float], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k in sorted(metrics):
            w.writerow([k, repr(float(metrics[k]))])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, config: TrainConfig, directory,
                    metrics: Optional[Dict[str, float]] = None) -> Path:
    """``manifest.json`` plus one little-endian float32 blob per parameter."""
    out = Path(directory)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in state.store.state().items():
        fname = f"params/{name}.f32"
        np.ascontiguousarray(arr, dtype="<f4").tofile(out / fname)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": fname})
    manifest = {"format": "geovox-ckpt/1", "config_digest": config.digest(),
                "config": config.to_text(), "iteration": state.iteration,
                "metrics": metrics or {}, "parameters": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_checkpoint(directory, config: Optional[TrainConfig] = None) -> TrainState:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if config is None:
        config = TrainConfig.from_text(manifest["config"])
    elif config.digest() != manifest["config_digest"]:
        log.warning("config digest differs from checkpoint manifest")
    state = init_state(config)
    arrays = {e["name"]: np.fromfile(root / e["file"], dtype=e["dtype"]).reshape(e["shape"])
              for e in manifest["parameters"]}
    state.store.load(arrays)
    state.iteration = int(manifest["iteration"])
    return state


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

SUITES: Dict[str, Dict[str, Dict[str, object]]] = {
    "geometry": {
        "gt-depth": {"geometry": "gt-depth"},
        "nerf-opacity": {"geometry": "nerf-opacity"},
        "cost-volume": {"geometry": "cost-volume"},
        "none": {"geometry": "none"},
    },
    "losses": {
        "no-photo,no-depth": {"photo_loss": False, "depth_loss": False},
        "photo": {"photo_loss": True, "depth_loss": False},
        "depth": {"photo_loss": False, "depth_loss": True},
        "photo+depth": {"photo_loss": True, "depth_loss": True},
    },
    "features": {
        "avg": {"feature_set": "avg"},
        "avg+var": {"feature_set": "avg+var"},
        "avg+var+rgb": {"feature_set": "avg+var+rgb"},
    },
    "sample-source/share-gmlp": {
        "image,shared": {"sample_source": "image", "share_gmlp": True},
        "volume,shared": {"sample_source": "volume", "share_gmlp": True},
        "image,separate": {"sample_source": "image", "share_gmlp": False},
    },
    "det-branch-off": {
        "with-det": {"detection_branch": True},
        "without-det": {"detection_branch": False},
    },
}

METRICS = ("map25", "map50", "psnr", "ssim", "rmse", "opacity_auc", "opacity_auc_binary")


def run_variant(config: TrainConfig, train_scenes=None, eval_scenes=None) -> Dict[str, float]:
    state = train(config, train_scenes)
    held = make_scenes(config, "eval") if eval_scenes is None else eval_scenes
    return evaluate_all(state.model, held, config)


def run_ablation(suite: str, base: TrainConfig, seeds: Sequence[int], out_csv=None,
                 cache_dir=None) -> List[Dict[str, object]]:
    """Train every variant of ``suite`` for each seed and tabulate mean/std.

    Per-run metrics are memoised as CSV under ``cache_dir`` (keyed by config
    digest) so suites sharing a variant do not retrain it.
    """
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    if len(seeds) < 3:
        log.warning("fewer than 3 seeds; std will be unreliable")
    rows = []
    for name, changes in SUITES[suite].items():
        runs = []
        for seed in seeds:
            cfg = base.replace(seed=seed, **changes)
            runs.append(_cached_run(cfg, cache_dir))
        row: Dict[str, object] = {"suite": suite, "variant": name, "n_seeds": len(seeds)}
        for m in METRICS:
            vals = [r[m] for r in runs if m in r]
            if vals:
                row[f"{m}_mean"] = float(np.mean(vals))
                row[f"{m}_std"] = float(np.std(vals))
        rows.append(row)
    if out_csv is not None:
        write_table(rows, out_csv)
    return rows


def _cached_run(cfg: TrainConfig, cache_dir) -> Dict[str, float]:
    if cache_dir is None:
        return run_variant(cfg)
    path = Path(cache_dir) / f"{cfg.digest()}.csv"
    if path.exists():
        with open(path) as f:
            return {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    metrics = run_variant(cfg)
    log.info("run %s done in %.0fs: %s", cfg.digest(), time.perf_counter() - t0, metrics)
    cfg.save(path.with_suffix(".cfg"))
    write_metrics_csv(metrics, path)
    return metrics


def write_table(rows: Sequence[Dict[str, object]], path) -> None:
    cols: List[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
