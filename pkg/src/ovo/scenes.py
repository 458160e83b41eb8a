"""Synthetic scenes with an oracle teacher, and scene (de)serialization.

A scene directory holds ``manifest.json`` plus one tensor (JSON sidecar +
``.bin``) per array. See FORMATS.md for the layout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .geometry import CameraModel, VoxelGrid, first_hit, segment_box_exit, to_grid_units
from .numerics.tensor import load_tensor, save_tensor
from .vocab import CategorySchema, EmbeddingBank, confidence_from_teacher
from .volumes import EMPTY, LabelVolume, SegMap2D

NUM_LEVELS = 5

DEFAULT_BASE = ("floor", "chair", "sofa", "tvs", "furniture")
DEFAULT_NOVEL = ("bed", "table", "other")

NYU_NAMES = ("ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tvs", "furniture", "other")
NYU_NOVEL = frozenset({"bed", "table", "other"})
KITTI_NAMES = ("car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist", "motorcyclist",
               "road", "parking", "sidewalk", "other-ground", "building", "fence", "vegetation", "trunk",
               "terrain", "pole", "traffic-sign")
KITTI_NOVEL = frozenset({"car", "road", "building"})
DATASETS = {
    "nyuv2": {"dims": (60, 36, 60), "names": NYU_NAMES, "novel": NYU_NOVEL},
    "semantickitti": {"dims": (256, 256, 32), "names": KITTI_NAMES, "novel": KITTI_NOVEL},
}


class SceneFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    grid_dims: tuple[int, int, int] = (24, 16, 24)
    voxel_size: float = 0.1
    up_axis: int = 1
    image_size: tuple[int, int] = (64, 48)  # (width, height)
    fov_deg: float = 70.0
    camera_height: float = 1.6  # fraction of the grid height (above the grid sees more surface)
    camera_back: float = 0.35  # fraction of the depth extent behind the grid face
    base_names: tuple[str, ...] = DEFAULT_BASE
    novel_names: tuple[str, ...] = DEFAULT_NOVEL
    feat_dim: int = 200
    embed_dim: int = 512
    student_dim: int = 200
    objects: tuple[int, int] = (3, 6)
    object_size: tuple[int, int] = (2, 6)
    sigma: float = 0.05
    temperature: float = 1.0
    teacher_vocab: str = "all"  # "all" or "base" (base classes + background)
    corrupt_fraction: float = 0.0
    corrupt_confidence: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.image_size = tuple(int(d) for d in self.image_size)
        self.objects = tuple(int(v) for v in self.objects)
        self.object_size = tuple(int(v) for v in self.object_size)
        self.base_names = tuple(self.base_names)
        self.novel_names = tuple(self.novel_names)
        if len(self.grid_dims) != 3 or min(self.grid_dims) <= 0:
            raise ValueError(f"grid dims must be positive, got {self.grid_dims}")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        if min(self.feat_dim, self.embed_dim, self.student_dim) <= 0:
            raise ValueError("feature dims must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.base_names:
            raise ValueError("need at least one base class")
        if self.up_axis not in (0, 1, 2):
            raise ValueError("up_axis must be 0, 1 or 2")
        if self.teacher_vocab not in ("all", "base"):
            raise ValueError("teacher_vocab must be 'all' or 'base'")
        if not 0 <= self.corrupt_fraction <= 1:
            raise ValueError("corrupt_fraction must lie in [0, 1]")
        if not 0 < self.corrupt_confidence <= 1:
            raise ValueError("corrupt_confidence must lie in (0, 1]")
        lo, hi = self.object_size
        if lo < 1 or hi < lo:
            raise ValueError("object size range must satisfy 1 <= min <= max")
        if self.objects[0] < 0 or self.objects[1] < self.objects[0]:
            raise ValueError("object count range must satisfy 0 <= min <= max")

    @property
    def schema(self) -> CategorySchema:
        return CategorySchema(self.base_names + self.novel_names, frozenset(self.novel_names))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(eq=False)
class Scene:
    name: str
    grid: VoxelGrid
    camera: CameraModel
    labels: LabelVolume
    bank: EmbeddingBank
    seg: SegMap2D
    teacher2d: np.ndarray | None = None  # (H, W, D)
    feat3d: np.ndarray | None = None  # (N, C) in linear voxel order
    pyramid: list[np.ndarray] | None = None  # 5 x (h_k, w_k, C2)
    provenance: str = "synthetic"
    dataset: str = "synthetic"
    meta: dict = field(default_factory=dict)

    @property
    def schema(self) -> CategorySchema:
        return self.bank.schema


# ---------------------------------------------------------------------------
# synthesis


def _axes(up: int):
    depth = 2 if up != 2 else 0
    lateral = ({0, 1, 2} - {up, depth}).pop()
    return lateral, up, depth


def place_objects(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Floor slab plus random axis-aligned boxes; returns labels indexed [x, y, z]."""
    schema = config.schema
    dims = config.grid_dims
    lat, up, dep = _axes(config.up_axis)
    vol = np.zeros(dims, dtype=np.uint8)
    floor = [slice(None)] * 3
    floor[up] = slice(0, 1)
    vol[tuple(floor)] = schema.id_of(config.base_names[0])
    lo, hi = config.object_size
    if config.objects[1] > 0 and (hi > min(dims[lat], dims[dep]) or hi > dims[up] - 1):
        raise ValueError(f"objects of size up to {hi} cannot fit in grid {dims} above the floor")
    candidates = [schema.id_of(n) for n in schema.names if n != config.base_names[0]] or [schema.id_of(config.base_names[0])]
    n_obj = int(rng.integers(config.objects[0], config.objects[1] + 1))
    for _ in range(n_obj):
        size = rng.integers(lo, hi + 1, size=3)
        start = [0, 0, 0]
        start[lat] = int(rng.integers(0, dims[lat] - size[lat] + 1))
        start[dep] = int(rng.integers(0, dims[dep] - size[dep] + 1))
        start[up] = 1
        sl = tuple(slice(start[a], start[a] + int(size[a])) for a in range(3))
        vol[sl] = candidates[int(rng.integers(len(candidates)))]
    return vol


def default_camera(config: SynthConfig) -> CameraModel:
    lat, up, dep = _axes(config.up_axis)
    s = config.voxel_size
    ext = np.asarray(config.grid_dims, dtype=np.float64) * s
    eye = np.zeros(3)
    eye[lat] = ext[lat] / 2
    eye[up] = ext[up] * config.camera_height
    eye[dep] = -ext[dep] * config.camera_back
    target = np.zeros(3)
    target[lat] = ext[lat] / 2
    target[up] = ext[up] * 0.2
    target[dep] = ext[dep] * 0.55
    upv = np.zeros(3)
    upv[up] = 1.0
    W, H = config.image_size
    f = (W / 2) / np.tan(np.radians(config.fov_deg) / 2)
    return CameraModel.look_at(eye, target, upv, f, f, W / 2, H / 2, W, H)


@numba.njit(cache=True, nogil=True)
def _render_kernel(g0, targets, dims, occupied, skip, out):
    for k in range(targets.shape[0]):
        out[k] = first_hit(g0, targets[k], dims, occupied, skip)


def render_first_hit(grid: VoxelGrid, labels: LabelVolume, camera: CameraModel) -> np.ndarray:
    """Linear index of the first occupied voxel along each pixel-center ray (-1 for none), (H, W)."""
    H, W = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d_cam = np.stack([(ii + 0.5 - camera.cx) / camera.fx, (jj + 0.5 - camera.cy) / camera.fy,
                      np.ones_like(ii, dtype=np.float64)], axis=-1).reshape(-1, 3)
    d = d_cam @ camera.rotation  # R^T d_cam, row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c = camera.center
    far = np.empty(d.shape[0])
    for k in range(d.shape[0]):
        t = segment_box_exit(c, d[k], grid)
        far[k] = -1.0 if t is None else t
    out = np.full(d.shape[0], -1, dtype=np.int64)
    hit = far > 0
    ends = c + d[hit] * (far[hit] * (1 + 1e-9) + 1e-6 * grid.voxel_size)[:, None]
    g0 = to_grid_units(c, grid)
    cam_idx = np.floor(g0).astype(np.int64)
    skip = int(grid.linear_index(cam_idx)) if grid.contains_index(cam_idx) else -1
    sub = np.empty(int(hit.sum()), dtype=np.int64)
    _render_kernel(g0, to_grid_units(ends, grid), np.asarray(grid.dims, dtype=np.int64),
                   labels.semantic_mask(), skip, sub)
    out[hit] = sub
    return out.reshape(H, W)


def render_segmentation(grid: VoxelGrid, labels: LabelVolume, camera: CameraModel,
                        schema: CategorySchema) -> np.ndarray:
    """GT 2D class map: class of the nearest occupied voxel per pixel, background where none."""
    hit = render_first_hit(grid, labels, camera)
    seg = np.full(hit.shape, schema.unknown_id, dtype=np.uint8)
    seg[hit >= 0] = labels.labels[hit[hit >= 0]]
    return seg


def _noise(rng, shape, sigma):
    """Isotropic noise whose expected norm along the last axis is about ``sigma``."""
    return rng.standard_normal(shape) * (sigma / np.sqrt(shape[-1]))


def _normalize(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def avg_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Block mean over ``stride x stride`` windows; ragged edge blocks average what exists."""
    if stride == 1:
        return x.copy()
    H, W, C = x.shape
    h, w = -(-H // stride), -(-W // stride)
    pad = np.zeros((h * stride, w * stride, C))
    cnt = np.zeros((h * stride, w * stride, 1))
    pad[:H, :W] = x
    cnt[:H, :W] = 1
    s = pad.reshape(h, stride, w, stride, C).sum(axis=(1, 3))
    n = cnt.reshape(h, stride, w, stride, 1).sum(axis=(1, 3))
    return s / n


class DatasetOracle:
    """Dataset-level seeded quantities shared by every scene: text bank, class
    prototypes for the 3D features, and the teacher->student projection."""

    def __init__(self, config: SynthConfig, bank: EmbeddingBank | None = None):
        self.config = config
        schema = config.schema
        rng = np.random.default_rng([config.seed, 1])
        self.bank = bank if bank is not None else EmbeddingBank.synthetic(schema, config.embed_dim, rng)
        # prototype row per label id 0..K+1 (empty, classes, unknown)
        self.prototypes = _normalize(rng.standard_normal((schema.unknown_id + 1, config.feat_dim)))
        self.projection = rng.standard_normal((config.embed_dim, config.student_dim)) / np.sqrt(config.student_dim)


def synth_scene(config: SynthConfig, index: int = 0, oracle: DatasetOracle | None = None,
                with_features: bool = True) -> Scene:
    """Deterministic synthetic scene number ``index`` of the dataset seeded by ``config.seed``.

    Float tensors are rounded to float32 so that a save/load round trip is exact.
    """
    oracle = oracle or DatasetOracle(config)
    schema, bank = config.schema, oracle.bank
    rng = np.random.default_rng([config.seed, 2, index])
    grid = VoxelGrid(config.grid_dims, (0.0, 0.0, 0.0), config.voxel_size)
    labels = LabelVolume.from_xyz(grid, place_objects(config, rng))
    camera = default_camera(config)
    gt2d = render_segmentation(grid, labels, camera, schema)
    H, W = gt2d.shape
    D = config.embed_dim

    id_to_row = {schema.id_of(n): bank.names.index(n) for n in bank.names}
    rows = np.array([id_to_row[int(c)] for c in gt2d.ravel()], dtype=np.int64)
    corrupt = rng.random(H * W) < config.corrupt_fraction
    if corrupt.any():
        shift = rng.integers(1, len(bank.names), size=int(corrupt.sum()))
        rows[corrupt] = (rows[corrupt] + shift) % len(bank.names)
    teacher = _normalize(bank.vectors[rows] + _noise(rng, (H * W, D), config.sigma))
    teacher = teacher.astype(np.float32).reshape(H, W, D)

    vocab = None if config.teacher_vocab == "all" else bank.training_names()
    seg = confidence_from_teacher(teacher.astype(np.float64), bank, config.temperature, vocab)
    conf = seg.confidence.copy()
    conf.reshape(-1)[corrupt] = config.corrupt_confidence
    seg = SegMap2D(seg.classes, conf.astype(np.float32).astype(np.float64))

    feat3d = pyramid = None
    if with_features:
        proto = oracle.prototypes[labels.labels.astype(np.int64)]
        feat3d = (proto + _noise(rng, proto.shape, config.sigma)).astype(np.float32)
        level0 = teacher.astype(np.float64).reshape(H * W, D) @ oracle.projection
        level0 = (level0 + _noise(rng, level0.shape, config.sigma)).reshape(H, W, -1)
        pyramid = [avg_pool(level0, 2 ** k).astype(np.float32) for k in range(NUM_LEVELS)]

    return Scene(f"scene_{index:04d}", grid, camera, labels, bank, seg, teacher, feat3d, pyramid,
                 meta={"synth": config.to_dict(), "index": index, "gt2d_checksum": int(gt2d.sum())})


# ---------------------------------------------------------------------------
# serialization

TENSOR_NAMES = ("labels", "feat3d", "teacher2d", "teacherseg", "conf")


def save_scene(scene: Scene, directory, bank_ref: str | None = None) -> Path:
    """Write ``scene`` to ``directory``; the bank is written alongside unless ``bank_ref`` points to one."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if bank_ref is None:
        scene.bank.save(directory / "bank.json")
        bank_ref = "bank.json"
    X, Y, Z = scene.grid.dims
    tensors = {}
    tensors["labels"] = save_tensor(directory / "labels.json", scene.labels.labels.reshape(Z, Y, X)).name
    if scene.feat3d is not None:
        tensors["feat3d"] = save_tensor(directory / "feat3d.json", np.asarray(scene.feat3d, np.float32)).name
    if scene.teacher2d is not None:
        tensors["teacher2d"] = save_tensor(directory / "teacher2d.json", np.asarray(scene.teacher2d, np.float32)).name
    tensors["teacherseg"] = save_tensor(directory / "teacherseg.json", scene.seg.classes).name
    tensors["conf"] = save_tensor(directory / "conf.json", scene.seg.confidence.astype(np.float32)).name
    if scene.pyramid is not None:
        for k, lvl in enumerate(scene.pyramid):
            tensors[f"student2d_l{k}"] = save_tensor(directory / f"student2d_l{k}.json",
                                                     np.asarray(lvl, np.float32)).name
    manifest = {
        "format": "ovo-scene/1",
        "name": scene.name,
        "provenance": scene.provenance,
        "dataset": scene.dataset,
        "grid": scene.grid.to_dict(),
        "camera": scene.camera.to_dict(),
        "bank": bank_ref,
        "tensors": tensors,
        "meta": scene.meta,
    }
    path = directory / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def load_scene(manifest_path, bank: EmbeddingBank | None = None) -> Scene:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing scene manifest: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        m = json.load(fh)
    grid = VoxelGrid.from_dict(m["grid"])
    camera = CameraModel.from_dict(m["camera"])
    bank = bank or EmbeddingBank.load(root / m["bank"])
    t = m["tensors"]
    X, Y, Z = grid.dims
    H, W = camera.height, camera.width

    def get(name, shape=None):
        if name not in t:
            raise SceneFormatError(f"scene manifest lacks tensor '{name}'")
        try:
            return load_tensor(root / t[name], shape, name=name)
        except ValueError as exc:
            raise SceneFormatError(str(exc)) from exc

    labels = LabelVolume(grid, get("labels", (Z, Y, X)).reshape(-1))
    labels.check_classes(bank.schema.unknown_id)
    seg = SegMap2D(get("teacherseg", (H, W)), get("conf", (H, W)).astype(np.float64))
    teacher2d = get("teacher2d") if "teacher2d" in t else None
    if teacher2d is not None and teacher2d.shape != (H, W, bank.dim):
        raise SceneFormatError(f"tensor 'teacher2d' has shape {list(teacher2d.shape)}, "
                               f"expected {[H, W, bank.dim]}")
    feat3d = get("feat3d") if "feat3d" in t else None
    if feat3d is not None and (feat3d.ndim != 2 or feat3d.shape[0] != grid.num_voxels):
        raise SceneFormatError(f"tensor 'feat3d' has shape {list(feat3d.shape)}, expected [{grid.num_voxels}, C]")
    pyramid = None
    if "student2d_l0" in t:
        pyramid = [get(f"student2d_l{k}") for k in range(NUM_LEVELS)]
        expected = [(-(-H // 2 ** k), -(-W // 2 ** k)) for k in range(NUM_LEVELS)]
        for k, (lvl, hw) in enumerate(zip(pyramid, expected)):
            if lvl.ndim != 3 or lvl.shape[:2] != hw or lvl.shape[2] != pyramid[0].shape[2]:
                raise SceneFormatError(f"tensor 'student2d_l{k}' has shape {list(lvl.shape)}, "
                                       f"expected [{hw[0]}, {hw[1]}, C2]")
    return Scene(m["name"], grid, camera, labels, bank, seg, teacher2d, feat3d, pyramid,
                 m.get("provenance", "ingested"), m.get("dataset", "synthetic"), m.get("meta", {}))


def ingest_real(directory) -> Scene:
    """Load an offline export and check it against its declared dataset (grid, classes, novel split)."""
    scene = load_scene(directory)
    expected = DATASETS.get(scene.dataset)
    if expected is None:
        raise SceneFormatError(f"unknown dataset {scene.dataset!r}; expected one of {sorted(DATASETS)}")
    if scene.grid.dims != expected["dims"]:
        raise SceneFormatError(f"{scene.dataset} grid must be {expected['dims']}, got {scene.grid.dims}")
    schema = scene.schema
    if len(schema.names) != len(expected["names"]):
        raise SceneFormatError(f"{scene.dataset} needs {len(expected['names'])} semantic classes "
                               f"({len(expected['names']) + 1} with empty), got {len(schema.names)}")
    if set(schema.names) != set(expected["names"]):
        raise SceneFormatError(f"{scene.dataset} class names differ: {sorted(set(schema.names) ^ set(expected['names']))}")
    if schema.novel != expected["novel"]:
        raise SceneFormatError(f"{scene.dataset} novel split must be {sorted(expected['novel'])}, got {sorted(schema.novel)}")
    scene.provenance = "ingested"
    return scene


def find_scenes(pattern: str | Sequence[str]) -> list[Path]:
    """Scene manifests matching a directory, glob, or list thereof, sorted by path."""
    import glob

    patterns = [pattern] if isinstance(pattern, (str, Path)) else list(pattern)
    found = set()
    for p in patterns:
        for hit in glob.glob(str(p)):
            hp = Path(hit)
            if hp.is_dir() and (hp / "manifest.json").exists():
                found.add(hp / "manifest.json")
            elif hp.is_dir():
                found.update(hp.glob("*/manifest.json"))
            elif hp.name == "manifest.json":
                found.add(hp)
    return sorted(found)
