"""KITTI label/calibration parsing and reproducible synthetic scenes."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box2D, Box3D, Calibration, default_calibration, project_center, wrap_angle

KITTI_CATEGORIES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc")
DEFAULT_IMAGE_SIZE = (1242, 375)
DEFAULT_NUM_BINS = 12


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownCategoryWarning(UserWarning):
    pass


class PlacementError(RuntimeError):
    pass


def yaw_to_bin(yaw: float, num_bins: int = DEFAULT_NUM_BINS) -> tuple[int, float]:
    """Bin centred at ``k * 2pi / num_bins`` plus the wrapped residual (|residual| <= half a bin)."""
    width = 2 * math.pi / num_bins
    k = int(round(wrap_angle(yaw) / width)) % num_bins
    return k, wrap_angle(yaw - k * width)


def bin_to_yaw(k: int, residual: float, num_bins: int = DEFAULT_NUM_BINS) -> float:
    return wrap_angle(k * 2 * math.pi / num_bins + residual)


@dataclass(frozen=True)
class Object3D:
    category: str
    center_proj: tuple[float, float]
    box2d: Box2D
    dims: tuple[float, float, float]  # (length, width, height), metres
    depth: float
    yaw: float
    orientation_bin: int
    orientation_residual: float
    # Raw KITTI fields kept so a writer can reproduce the label line.
    location: tuple[float, float, float] = (0.0, 0.0, 0.0)  # bottom centre, camera frame
    bbox_px: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = 0.0
    score: float | None = None

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"depth must be positive, got {self.depth}")

    @property
    def center3d(self) -> tuple[float, float, float]:
        x, y, z = self.location
        return (x, y - self.dims[2] / 2, z)

    @property
    def box3d(self) -> Box3D:
        return Box3D(self.center3d, self.dims, self.yaw)


@dataclass
class Scene:
    objects: list[Object3D]
    calib: Calibration = field(default_factory=default_calibration)
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    feature_seed: int = 0

    @property
    def K(self) -> int:
        return len(self.objects)

    def features(self, tokens: int, dim: int) -> np.ndarray:
        return np.random.default_rng(self.feature_seed).normal(size=(tokens, dim))


def make_object(category: str, location, dims_lwh, yaw: float, bbox_px, calib: Calibration,
                image_size, num_bins: int = DEFAULT_NUM_BINS, truncated: float = 0.0, occluded: int = 0,
                alpha: float | None = None, score: float | None = None) -> Object3D:
    """Build an :class:`Object3D` from KITTI-style raw fields."""
    W, H = image_size
    l3, w3, h3 = dims_lwh
    x, y, z = location
    xc, yc = project_center(Box3D((x, y - h3 / 2, z), (l3, w3, h3), yaw), calib, image_size)
    x1, y1, x2, y2 = bbox_px
    x1n, x2n = min(max(x1 / W, 0.0), 1.0), min(max(x2 / W, 0.0), 1.0)
    y1n, y2n = min(max(y1 / H, 0.0), 1.0), min(max(y2 / H, 0.0), 1.0)
    # Edge distances are measured from the projected 3D centre; a centre outside the
    # 2D box clips the offending side to zero.
    box2d = Box2D(
        min(max(xc - x1n, 0.0), 1.0), min(max(x2n - xc, 0.0), 1.0),
        min(max(yc - y1n, 0.0), 1.0), min(max(y2n - yc, 0.0), 1.0),
    )
    k, res = yaw_to_bin(yaw, num_bins)
    if alpha is None:
        alpha = wrap_angle(yaw - math.atan2(x, z))
    return Object3D(
        category=category, center_proj=(xc, yc), box2d=box2d, dims=(l3, w3, h3), depth=z, yaw=yaw,
        orientation_bin=k, orientation_residual=res, location=(x, y, z), bbox_px=(x1, y1, x2, y2),
        truncated=truncated, occluded=occluded, alpha=alpha, score=score,
    )


def parse_label_file(text: str, calib: Calibration | None = None, image_size=DEFAULT_IMAGE_SIZE,
                     num_bins: int = DEFAULT_NUM_BINS, categories: Sequence[str] = KITTI_CATEGORIES) -> list[Object3D]:
    """Parse KITTI label lines; DontCare lines are dropped, unknown categories warn and are skipped."""
    calib = calib or default_calibration()
    out = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        cat = parts[0]
        if cat == "DontCare":
            continue
        if len(parts) not in (15, 16):
            raise ParseError(f"expected 15 or 16 fields, got {len(parts)}", line_no)
        try:
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", line_no) from None
        if cat not in categories:
            warnings.warn(f"line {line_no}: unknown category {cat!r} skipped", UnknownCategoryWarning, stacklevel=2)
            continue
        truncated, occluded, alpha = vals[0], vals[1], vals[2]
        bbox = tuple(vals[3:7])
        h, w, l = vals[7:10]
        loc = tuple(vals[10:13])
        ry = vals[13]
        score = vals[14] if len(vals) == 15 else None
        if occluded != int(occluded):
            raise ParseError("occluded must be an integer", line_no)
        try:
            obj = make_object(cat, loc, (l, w, h), ry, bbox, calib, image_size, num_bins,
                              truncated=truncated, occluded=int(occluded), alpha=alpha, score=score)
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        out.append(obj)
    return out


def format_label_line(obj: Object3D) -> str:
    l3, w3, h3 = obj.dims
    fields = [obj.category, f"{obj.truncated:.2f}", str(obj.occluded), f"{obj.alpha:.2f}",
              *(f"{v:.2f}" for v in obj.bbox_px), f"{h3:.2f}", f"{w3:.2f}", f"{l3:.2f}",
              *(f"{v:.2f}" for v in obj.location), f"{obj.yaw:.2f}"]
    if obj.score is not None:
        fields.append(f"{obj.score:.4f}")
    return " ".join(fields)


def write_label_file(objects: Sequence[Object3D]) -> str:
    return "".join(format_label_line(o) + "\n" for o in objects)


def parse_calib_file(text: str) -> Calibration:
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if raw.startswith("P2:"):
            vals = raw[3:].split()
            if len(vals) != 12:
                raise ParseError(f"P2 needs 12 values, got {len(vals)}", line_no)
            try:
                return Calibration(np.array([float(v) for v in vals]).reshape(3, 4))
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
    raise ParseError("no P2 entry found", 0)


# -- synthetic scenes -------------------------------------------------------

CATEGORY_DIMS = {
    # mean (length, width, height) in metres
    "Car": (3.9, 1.6, 1.55),
    "Pedestrian": (0.8, 0.6, 1.75),
    "Cyclist": (1.75, 0.6, 1.7),
    "Van": (5.0, 1.9, 2.2),
    "Truck": (10.0, 2.5, 3.3),
}


@dataclass(frozen=True)
class SceneRanges:
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    depth: tuple[float, float] = (8.0, 40.0)
    lateral: tuple[float, float] = (-12.0, 12.0)
    ground_height: tuple[float, float] = (1.5, 1.8)
    dim_jitter: float = 0.1
    num_bins: int = DEFAULT_NUM_BINS
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE


def _corners(box: Box3D) -> np.ndarray:
    l, w, h = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
    ys = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * h / 2
    zs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
    x = c * xs + s * zs + box.center[0]
    z = -s * xs + c * zs + box.center[2]
    return np.stack([x, ys + box.center[1], z, np.ones(8)], axis=1)


def bbox_from_box3d(box: Box3D, calib: Calibration, image_size) -> tuple[float, float, float, float] | None:
    pts = _corners(box)
    if np.any(pts[:, 2] <= 0.1):
        return None
    uvw = pts @ calib.P2.T
    u, v = uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2]
    W, H = image_size
    x1, x2 = max(u.min(), 0.0), min(u.max(), W - 1.0)
    y1, y2 = max(v.min(), 0.0), min(v.max(), H - 1.0)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    return (float(x1), float(y1), float(x2), float(y2))


def generate_scene(rng_seed: int, K: int, ranges: SceneRanges | None = None,
                   calib: Calibration | None = None, max_tries: int = 1000) -> Scene:
    """Draw ``K`` objects uniformly in the configured ranges, rejecting off-frame placements."""
    if K < 1:
        raise ValueError("generate_scene needs K >= 1")
    ranges = ranges or SceneRanges()
    calib = calib or default_calibration()
    rng = np.random.default_rng(rng_seed)
    objs = []
    for _ in range(K):
        for _ in range(max_tries):
            cat = ranges.categories[int(rng.integers(len(ranges.categories)))]
            mean = np.array(CATEGORY_DIMS.get(cat, CATEGORY_DIMS["Car"]))
            dims = tuple(float(d) for d in mean * (1 + rng.uniform(-ranges.dim_jitter, ranges.dim_jitter, 3)))
            z = float(rng.uniform(*ranges.depth))
            x = float(rng.uniform(*ranges.lateral))
            y = float(rng.uniform(*ranges.ground_height))
            yaw = float(rng.uniform(-math.pi, math.pi))
            box = Box3D((x, y - dims[2] / 2, z), dims, yaw)
            xc, yc = project_center(box, calib, ranges.image_size)
            if not (0.0 < xc < 1.0 and 0.0 < yc < 1.0):
                continue
            bbox = bbox_from_box3d(box, calib, ranges.image_size)
            if bbox is None:
                continue
            objs.append(make_object(cat, (x, y, z), dims, yaw, bbox, calib, ranges.image_size, ranges.num_bins))
            break
        else:
            raise PlacementError(f"could not place an object in frame after {max_tries} draws")
    return Scene(objs, calib, ranges.image_size, feature_seed=int(rng.integers(2**31)))


def generate_scenes(seed: int, count: int, k_range: tuple[int, int] = (1, 3),
                    ranges: SceneRanges | None = None) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(int(rng.integers(2**31)), int(rng.integers(k_range[0], k_range[1] + 1)), ranges)
            for _ in range(count)]


# -- JSON fixtures ------------------------------------------------------------

def object_to_dict(obj: Object3D) -> dict:
    d = asdict(obj)
    d["box2d"] = asdict(obj.box2d)
    return d


def object_from_dict(d: dict) -> Object3D:
    d = dict(d)
    d["box2d"] = Box2D(**d["box2d"])
    for key in ("center_proj", "dims", "location", "bbox_px"):
        d[key] = tuple(d[key])
    return Object3D(**d)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "objects": [object_to_dict(o) for o in scene.objects],
        "P2": scene.calib.P2.tolist(),
        "image_size": list(scene.image_size),
        "feature_seed": scene.feature_seed,
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene([object_from_dict(o) for o in d["objects"]], Calibration(np.array(d["P2"])),
                 tuple(d["image_size"]), int(d["feature_seed"]))


def dump_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def with_category(obj: Object3D, category: str) -> Object3D:
    return replace(obj, category=category)
