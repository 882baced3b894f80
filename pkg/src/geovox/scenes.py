"""Procedural box-world scenes with analytic ground truth.

A scene is an axis-aligned room containing 1-4 axis-aligned boxes resting on
the floor. Every surface has a flat (view-independent) albedo, so any surface
point has exactly the same colour in every view that sees it. Images and
depth maps are rendered exactly by slab intersection of pixel-centre rays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .detection import Box3D, iou_matrix
from .geometry import (CameraIntrinsics, CameraPose, CameraView, GridSpec, image_rays,
                       look_at, voxel_centers)

FORMAT_VERSION = "geovox-scene/1"

# Per class: base albedo, xy size range, z size range (metres).
CLASS_PALETTE = (
    ((0.80, 0.22, 0.18), (0.9, 1.4), (0.45, 0.75)),
    ((0.18, 0.32, 0.82), (0.5, 0.8), (1.00, 1.50)),
    ((0.22, 0.74, 0.28), (0.4, 0.6), (0.40, 0.60)),
)


def _quantize(rgb) -> np.ndarray:
    """Snap colours to the 8-bit lattice so PNG storage is lossless."""
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255) / 255


@dataclass
class SceneObject:
    box: Box3D
    albedo: np.ndarray


@dataclass
class SceneSpec:
    room_min: np.ndarray
    room_max: np.ndarray
    objects: List[SceneObject]
    wall_albedos: np.ndarray     # (4, 3): -x, +x, -y, +y walls
    floor_albedo: np.ndarray
    ceiling_albedo: np.ndarray
    seed: int = 0

    @property
    def boxes(self) -> List[Box3D]:
        return [o.box for o in self.objects]

    @property
    def center(self) -> np.ndarray:
        return (self.room_min + self.room_max) / 2


@dataclass
class SceneConfig:
    room_size: Tuple[float, float, float] = (6.4, 6.4, 3.2)
    min_objects: int = 1
    max_objects: int = 4
    placement_half_width: float = 1.7
    max_pair_iou: float = 0.05
    albedo_jitter: float = 0.05
    max_attempts: int = 500
    size_scale: float = 1.0


class PlacementError(RuntimeError):
    pass


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SceneSpec:
    """Seeded random room with non-overlapping boxes on the floor."""
    rng = np.random.default_rng(seed)
    room_min = np.zeros(3)
    room_max = np.asarray(config.room_size, dtype=np.float64)
    center = (room_min + room_max) / 2
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: List[SceneObject] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > config.max_attempts:
            raise PlacementError(
                f"could not place {n} objects after {config.max_attempts} attempts; "
                "try smaller objects or a larger placement area")
        label = int(rng.integers(len(CLASS_PALETTE)))
        base, xy_range, z_range = CLASS_PALETTE[label]
        size = np.array([rng.uniform(*xy_range), rng.uniform(*xy_range),
                         rng.uniform(*z_range)]) * config.size_scale
        half = config.placement_half_width - size[:2] / 2
        if np.any(half <= 0):
            continue
        xy = center[:2] + rng.uniform(-half, half)
        box = Box3D(np.array([xy[0], xy[1], room_min[2] + size[2] / 2]), size, label)
        if objects:
            lo = np.stack([o.box.min for o in objects])
            hi = np.stack([o.box.max for o in objects])
            if iou_matrix(box.min[None], box.max[None], lo, hi).max() > config.max_pair_iou:
                continue
        albedo = _quantize(np.asarray(base) + rng.uniform(-config.albedo_jitter,
                                                          config.albedo_jitter, 3))
        objects.append(SceneObject(box, albedo))
    walls = _quantize(rng.uniform(0.55, 0.9, (4, 1)) * np.array([1.0, 0.95, 0.85])
                      + rng.uniform(-0.04, 0.04, (4, 3)))
    floor = _quantize(np.array([0.45, 0.36, 0.26]) + rng.uniform(-0.06, 0.06, 3))
    ceiling = _quantize(np.full(3, 0.93) + rng.uniform(-0.03, 0.03, 3))
    return SceneSpec(room_min, room_max, objects, walls, floor, ceiling, int(seed))


def camera_trajectory(spec: SceneSpec, n_views: int, radius: float, height: float,
                      phase: float = 0.0, target=None) -> List[CameraPose]:
    """Poses evenly spaced on a horizontal circle around the room centre.

    All cameras look at ``target`` (the room centre by default).
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    target = spec.center if target is None else np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n_views):
        a = phase + 2 * np.pi * k / n_views
        eye = np.array([spec.center[0] + radius * np.cos(a),
                        spec.center[1] + radius * np.sin(a), height])
        poses.append(look_at(eye, target))
    return poses


def _slab(origins, dirs, lo, hi):
    """Entry/exit distances of rays against one box (``inf`` where missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return t_lo.max(-1), t_hi.min(-1), t_lo.argmax(-1)


def intersect_scene(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit of rays starting inside the room.

    Returns ``(t, surface_id, normal_axis)``: surface ids ``0..5`` are room
    faces (-x, +x, -y, +y, floor, ceiling), ``6 + i`` is object ``i``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pos = np.where(dirs > 0, (spec.room_max - origins) / dirs, np.inf)
        t_neg = np.where(dirs < 0, (spec.room_min - origins) / dirs, np.inf)
    t_axis = np.minimum(t_pos, t_neg)
    axis = t_axis.argmin(-1)
    t = np.take_along_axis(t_axis, axis[..., None], -1)[..., 0]
    d_axis = np.take_along_axis(dirs, axis[..., None], -1)[..., 0]
    surface = 2 * axis + (d_axis > 0)
    normal_axis = axis.copy()
    for i, obj in enumerate(spec.objects):
        t_in, t_out, ax = _slab(origins, dirs, obj.box.min, obj.box.max)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < t)
        t = np.where(hit, t_in, t)
        surface = np.where(hit, 6 + i, surface)
        normal_axis = np.where(hit, ax, normal_axis)
    return t, surface, normal_axis


def surface_albedos(spec: SceneSpec) -> np.ndarray:
    room = [*spec.wall_albedos, spec.floor_albedo, spec.ceiling_albedo]
    return np.stack(room + [o.albedo for o in spec.objects])


_LIGHT = np.array([0.3, 0.5, 0.81])


def render_reference(spec: SceneSpec, intrinsics: CameraIntrinsics, pose: CameraPose,
                     shading: bool = False):
    """Exact colour and ray-distance depth for every pixel centre.

    With ``shading`` a fixed directional Lambert term scales the albedo; it is
    still view-independent.
    """
    origins, dirs = image_rays(intrinsics, pose)
    t, surface, normal_axis = intersect_scene(spec, origins, dirs)
    image = surface_albedos(spec)[surface]
    if shading:
        light = _LIGHT / np.linalg.norm(_LIGHT)
        image = image * (0.6 + 0.4 * np.abs(light[normal_axis]))[..., None]
    return image, t


def occupancy_grid(spec: SceneSpec, grid: GridSpec) -> np.ndarray:
    """1 where the voxel centre lies inside (or on) any object box."""
    centers = voxel_centers(grid)
    occ = np.zeros(len(centers), dtype=np.uint8)
    for obj in spec.objects:
        occ |= np.all((centers >= obj.box.min) & (centers <= obj.box.max), axis=1).astype(np.uint8)
    return occ.reshape(grid.nz, grid.ny, grid.nx).transpose(2, 1, 0).copy()


@dataclass
class CameraRig:
    """Camera layout used to build bundles (desk-scale defaults)."""

    width: int = 64
    height: int = 48
    focal: float = 32.0
    n_source: int = 12
    source_radius: float = 2.7
    source_height: float = 2.4
    n_novel: int = 10
    novel_radius: float = 2.2
    novel_height: float = 2.1
    novel_phase: float = 0.157

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2,
                                (self.height - 1) / 2, self.width, self.height)


def default_grid(spec: Optional[SceneSpec] = None, shape=(24, 24, 12)) -> GridSpec:
    lo = np.zeros(3) if spec is None else spec.room_min
    hi = np.array([6.4, 6.4, 3.2]) if spec is None else spec.room_max
    return GridSpec(*shape, origin=tuple(lo), voxel_size=tuple((hi - lo) / np.array(shape)))


@dataclass
class SceneBundle:
    spec: SceneSpec
    grid: GridSpec
    source_views: List[CameraView]
    novel_views: List[CameraView]
    source_depths: List[np.ndarray] = field(repr=False)
    novel_depths: List[np.ndarray] = field(repr=False)
    occupancy: np.ndarray = field(repr=False)

    @property
    def boxes(self) -> List[Box3D]:
        return self.spec.boxes

    @property
    def views(self) -> List[CameraView]:
        return self.source_views + self.novel_views

    @property
    def depth_maps(self) -> List[np.ndarray]:
        return self.source_depths + self.novel_depths


def make_bundle(seed: int, scene_config: SceneConfig = SceneConfig(),
                rig: CameraRig = CameraRig(), grid_shape=(24, 24, 12),
                shading: bool = False) -> SceneBundle:
    spec = generate_scene(seed, scene_config)
    K = rig.intrinsics()

    def render(poses):
        views, depths = [], []
        for pose in poses:
            image, depth = render_reference(spec, K, pose, shading)
            views.append(CameraView(K, pose, _quantize(image)))
            depths.append(depth.astype(np.float32).astype(np.float64))
        return views, depths

    src, src_d = render(camera_trajectory(spec, rig.n_source, rig.source_radius, rig.source_height))
    nov, nov_d = render(camera_trajectory(spec, rig.n_novel, rig.novel_radius, rig.novel_height,
                                          phase=rig.novel_phase))
    grid = default_grid(spec, grid_shape)
    return SceneBundle(spec, grid, src, nov, src_d, nov_d, occupancy_grid(spec, grid))


# ---------------------------------------------------------------------------
# On-disk format (see docs/scene_format.md)
# ---------------------------------------------------------------------------

def _grid_dict(grid: GridSpec) -> dict:
    return {"dims": list(grid.shape), "origin": list(grid.origin),
            "voxel_size": list(grid.voxel_size)}


def save_bundle(bundle: SceneBundle, directory) -> Path:
    from PIL import Image

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    spec = bundle.spec
    views = []
    for role, vs, ds in (("source", bundle.source_views, bundle.source_depths),
                         ("novel", bundle.novel_views, bundle.novel_depths)):
        for view, depth in zip(vs, ds):
            i = len(views)
            img_name, depth_name = f"view_{i:03d}.png", f"depth_{i:03d}.f32"
            rgb8 = np.round(np.asarray(view.image) * 255).astype(np.uint8)
            Image.fromarray(rgb8, "RGB").save(out / img_name)
            np.asarray(depth, dtype="<f4").tofile(out / depth_name)
            (out / (depth_name + ".hdr")).write_text(
                json.dumps({"width": int(depth.shape[1]), "height": int(depth.shape[0]),
                            "dtype": "<f4", "order": "row-major"}) + "\n")
            K = view.intrinsics
            views.append({"role": role, "image": img_name, "depth": depth_name,
                          "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                                         "width": K.width, "height": K.height},
                          "extrinsics": view.pose.matrix.tolist()})
    np.ascontiguousarray(bundle.occupancy.transpose(2, 1, 0), dtype=np.uint8).tofile(out / "occupancy.u8")
    doc = {
        "format": FORMAT_VERSION,
        "units": "metres",
        "seed": spec.seed,
        "room": {"min": spec.room_min.tolist(), "max": spec.room_max.tolist()},
        "wall_albedos": spec.wall_albedos.tolist(),
        "floor_albedo": spec.floor_albedo.tolist(),
        "ceiling_albedo": spec.ceiling_albedo.tolist(),
        "objects": [{**o.box.to_dict(), "albedo": o.albedo.tolist()} for o in spec.objects],
        "grid": _grid_dict(bundle.grid),
        "occupancy": {"file": "occupancy.u8", "dtype": "u1", "order": "x-fastest"},
        "views": views,
    }
    (out / "scene.json").write_text(json.dumps(doc, indent=1))
    return out


def load_bundle(directory) -> SceneBundle:
    from PIL import Image

    root = Path(directory)
    doc = json.loads((root / "scene.json").read_text())
    if doc.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported scene format {doc.get('format')!r}")
    objects = [SceneObject(Box3D(o["center"], o["size"], o["label"]), np.asarray(o["albedo"]))
               for o in doc["objects"]]
    spec = SceneSpec(np.asarray(doc["room"]["min"], dtype=np.float64),
                     np.asarray(doc["room"]["max"], dtype=np.float64), objects,
                     np.asarray(doc["wall_albedos"]), np.asarray(doc["floor_albedo"]),
                     np.asarray(doc["ceiling_albedo"]), int(doc["seed"]))
    g = doc["grid"]
    grid = GridSpec(*g["dims"], origin=tuple(g["origin"]), voxel_size=tuple(g["voxel_size"]))
    src, nov, src_d, nov_d = [], [], [], []
    for v in doc["views"]:
        K = CameraIntrinsics(**v["intrinsics"])
        E = np.asarray(v["extrinsics"], dtype=np.float64)
        image = np.asarray(Image.open(root / v["image"]).convert("RGB"), dtype=np.float64) / 255
        hdr = json.loads((root / (v["depth"] + ".hdr")).read_text())
        depth = np.fromfile(root / v["depth"], dtype="<f4").reshape(hdr["height"], hdr["width"])
        view = CameraView(K, CameraPose(E[:, :3], E[:, 3]), image)
        (src if v["role"] == "source" else nov).append(view)
        (src_d if v["role"] == "source" else nov_d).append(depth.astype(np.float64))
    occ = np.fromfile(root / doc["occupancy"]["file"], dtype=np.uint8)
    occ = occ.reshape(grid.nz, grid.ny, grid.nx).transpose(2, 1, 0).copy()
    return SceneBundle(spec, grid, src, nov, src_d, nov_d, occ)
