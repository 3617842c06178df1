"""Procedural aerial scenes with paired, imperfect map layers.

A scene is painted from vector-like objects (road polylines, building
rectangles, vegetation/tree ellipses, cars, clutter blobs, a pond).  Each
object that has a map counterpart is also rasterised into its map layer,
then the layers are degraded (dropped objects, jitter, dilation/erosion)
to mimic crowd-sourced map errors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .rasters import (DEFAULT_LAYERS, UNDEFINED, LabelMap, MapLayerSet, MultiChannelRaster,
                      read_labels, read_mask, read_raster, write_labels, write_mask, write_raster)

GENERATOR_VERSION = "1.0"
CLASSES = ("impervious", "building", "low_vegetation", "tree", "car", "clutter")
IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)

# mean reflectance per class; buildings sit close to roads on purpose
BASE_COLORS = {
    IMPERVIOUS: (0.55, 0.55, 0.56),
    BUILDING: (0.55, 0.55, 0.56),
    LOW_VEG: (0.36, 0.54, 0.27),
    TREE: (0.17, 0.36, 0.15),
    CAR: (0.75, 0.25, 0.22),
    CLUTTER: (0.47, 0.38, 0.31),
}
WATER_COLOR = (0.16, 0.27, 0.43)

DEFAULT_COUNTS = {"roads": 4, "plazas": 8, "buildings": 22, "parks": 2, "water": 1,
                  "trees": 18, "cars": 12, "clutter": 5}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 256
    channels: int = 3
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    building_side: tuple = (16, 40)
    # plazas share the building size range so shape alone cannot separate them
    plaza_side: tuple = (16, 40)
    road_width: tuple = (8, 14)
    vegetation_radius: tuple = (12, 30)
    tree_radius: tuple = (5, 12)
    texture_sigma: float = 0.08
    object_sigma: float = 0.06
    illumination: float = 0.15
    p_drop: float = 0.0
    jitter_px: int = 0
    dilate_erode_px: int = 0
    keep_fraction: float = 1.0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("scene size must be at least 64")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")
        if self.channels < 1:
            raise ValueError("need at least one optical channel")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("building_side", "plaza_side", "road_width", "vegetation_radius", "tree_radius"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("building_side", "plaza_side", "road_width", "vegetation_radius", "tree_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class MapObject:
    """One rasterised object: boolean footprint anchored at (top, left)."""

    label: int
    layer: str | None
    top: int
    left: int
    footprint: np.ndarray

    def paste(self, canvas: np.ndarray, value=True, dy: int = 0, dx: int = 0) -> None:
        h, w = canvas.shape
        fh, fw = self.footprint.shape
        y0, x0 = self.top + dy, self.left + dx
        ys, xs = max(y0, 0), max(x0, 0)
        ye, xe = min(y0 + fh, h), min(x0 + fw, w)
        if ys >= ye or xs >= xe:
            return
        region = self.footprint[ys - y0:ye - y0, xs - x0:xe - x0]
        canvas[ys:ye, xs:xe][region] = value

    def full_mask(self, shape) -> np.ndarray:
        canvas = np.zeros(shape, dtype=bool)
        self.paste(canvas)
        return canvas


@dataclass
class Scene:
    optical: MultiChannelRaster
    layers: MapLayerSet
    labels: LabelMap
    spec: SceneSpec
    objects: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        hw = self.labels.shape
        if self.optical.shape[1:] != hw or self.layers.masks.shape[1:] != hw:
            raise ValueError("scene members must share spatial dimensions")


# ------------------------------------------------------------------ geometry


def _crop(full: np.ndarray, label: int, layer: str | None) -> MapObject | None:
    ys, xs = np.nonzero(full)
    if ys.size == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return MapObject(label, layer, int(y0), int(x0), full[y0:y1, x0:x1].copy())


def _polyline_mask(points: np.ndarray, width: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    best = np.full((size, size), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        ab = b - a
        denom = float(ab @ ab) or 1.0
        t = np.clip(((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / denom, 0.0, 1.0)
        d = (yy - a[0] - t * ab[0]) ** 2 + (xx - a[1] - t * ab[1]) ** 2
        np.minimum(best, d, out=best)
    return best <= (width / 2.0) ** 2


def _ellipse_mask(cy, cx, ry, rx, angle, size) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _rect_mask(top, left, h, w, size) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[top:top + h, left:left + w] = True
    return m


def _edge_point(rng, size, edge) -> np.ndarray:
    t = rng.uniform(0, size - 1)
    return np.array([(0.0, t), (size - 1.0, t), (t, 0.0), (t, size - 1.0)][edge])


def _layout(spec: SceneSpec, rng: np.random.Generator) -> list[MapObject]:
    size = spec.size
    counts = {**DEFAULT_COUNTS, **spec.counts}
    objects: list[MapObject] = []
    road_union = np.zeros((size, size), dtype=bool)
    blocked = np.zeros((size, size), dtype=bool)

    for _ in range(counts["roads"]):
        a, b = rng.choice(4, size=2, replace=False)
        pts = [_edge_point(rng, size, a)]
        pts.append(rng.uniform(size * 0.2, size * 0.8, size=2))
        pts.append(_edge_point(rng, size, b))
        width = rng.uniform(*spec.road_width)
        m = _polyline_mask(np.array(pts), width, size)
        road_union |= m
        objects.append(_crop(m, IMPERVIOUS, "roads"))

    def place_rect(side, avoid, spacing, tries=60):
        # free-standing rectangle, at least 3 px from anything already in ``spacing``
        lo, hi = side
        for _attempt in range(tries):
            h, w = rng.integers(lo, hi + 1, size=2)
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            m = _rect_mask(top, left, h, w, size)
            near = spacing[max(top - 3, 0):top + h + 3, max(left - 3, 0):left + w + 3].any()
            if not near and not (m & avoid).any():
                return m
        return None

    # plazas are laid out like buildings so that footprint shape does not give them away
    paved = road_union.copy()
    spacing = np.zeros((size, size), dtype=bool)
    for _ in range(counts["plazas"]):
        m = place_rect(spec.plaza_side, road_union, spacing)
        if m is None:
            continue
        spacing |= m
        paved |= m
        objects.append(_crop(m, IMPERVIOUS, None))

    def place_blob(label, layer, radius, avoid, tries=40):
        for _attempt in range(tries):
            ry, rx = rng.uniform(*radius, size=2)
            cy, cx = rng.uniform(0, size, size=2)
            m = _ellipse_mask(cy, cx, ry, rx, rng.uniform(0, np.pi), size)
            if m.any() and not (m & avoid).any():
                return _crop(m, label, layer)
        return None

    green = np.zeros((size, size), dtype=bool)
    for _ in range(counts["parks"]):
        obj = place_blob(LOW_VEG, "vegetation", spec.vegetation_radius, paved)
        if obj is not None:
            objects.append(obj)
            obj.paste(green)
    for _ in range(counts["water"]):
        obj = place_blob(CLUTTER, "water", (8, 18), paved | green)
        if obj is not None:
            objects.append(obj)
            obj.paste(green)

    # buildings may touch pavement (same colour, so only the map tells them apart)
    # but keep 3 px from each other so every building stays its own component
    occupied = paved | green
    for _ in range(counts["buildings"]):
        m = place_rect(spec.building_side, occupied, spacing)
        if m is None:
            continue
        spacing |= m
        blocked |= m
        objects.append(_crop(m, BUILDING, "buildings"))

    for _ in range(counts["trees"]):
        obj = place_blob(TREE, None, spec.tree_radius, blocked | paved)
        if obj is not None:
            objects.append(obj)
    for _ in range(counts["clutter"]):
        obj = place_blob(CLUTTER, None, (5, 9), blocked)
        if obj is not None:
            objects.append(obj)

    road_pixels = np.argwhere(paved & ~blocked)
    for _ in range(counts["cars"]):
        if road_pixels.size == 0:
            break
        cy, cx = road_pixels[rng.integers(len(road_pixels))]
        h, w = (8, 14) if rng.random() < 0.5 else (14, 8)
        top = int(np.clip(cy - h // 2, 0, size - h))
        left = int(np.clip(cx - w // 2, 0, size - w))
        m = _rect_mask(top, left, h, w, size)
        if (m & blocked).any():
            continue
        objects.append(_crop(m, CAR, None))
    return objects


_PAINT_ORDER = {LOW_VEG: 0, IMPERVIOUS: 2, TREE: 3, CAR: 5, BUILDING: 6}


def _paint_order(obj: MapObject) -> int:
    if obj.layer == "water":
        return 1
    if obj.label == CLUTTER:
        return 4
    return _PAINT_ORDER[obj.label]


def _render(spec: SceneSpec, objects: list[MapObject], rng: np.random.Generator):
    size = spec.size
    labels = np.full((size, size), LOW_VEG, dtype=np.uint8)
    base = np.empty((spec.channels, size, size), dtype=np.float64)
    colors = _channel_colors(spec.channels)
    background = colors[LOW_VEG] + rng.normal(0, spec.object_sigma, spec.channels)
    base[:] = background[:, None, None]
    for obj in sorted(objects, key=_paint_order):
        if obj.layer == "water":
            color = _extend(WATER_COLOR, spec.channels)
        elif obj.label == CAR:
            color = rng.uniform(0.1, 0.9, spec.channels)
        else:
            color = colors[obj.label]
        color = color + rng.normal(0, spec.object_sigma, spec.channels)
        mask = obj.full_mask((size, size))
        labels[mask] = obj.label
        base[:, mask] = color[:, None]
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0) - 0.5
    theta = rng.uniform(0, 2 * np.pi)
    gain = 1.0 + rng.uniform(-spec.illumination, spec.illumination) * 2 * (
        np.cos(theta) * yy + np.sin(theta) * xx)
    noise = rng.normal(0, spec.texture_sigma, base.shape)
    optical = np.clip(base * gain[None] + noise, 0.0, 1.0).astype(np.float32)
    return optical, labels


def _extend(rgb, channels: int) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if channels <= 3:
        return rgb[:channels]
    # extra bands: fixed mixtures of the visible ones
    extra = [0.5 * (rgb[i % 3] + rgb[(i + 1) % 3]) for i in range(channels - 3)]
    return np.concatenate([rgb, np.array(extra)])


def _channel_colors(channels: int) -> dict[int, np.ndarray]:
    return {c: _extend(rgb, channels) for c, rgb in BASE_COLORS.items()}


# ---------------------------------------------------------------- map layers


def rasterize_layers(objects: list[MapObject], shape, names=DEFAULT_LAYERS) -> MapLayerSet:
    masks = np.zeros((len(names), *shape), dtype=bool)
    by_layer: dict[str, list[MapObject]] = {n: [] for n in names}
    for obj in objects:
        if obj.layer in by_layer:
            obj.paste(masks[names.index(obj.layer)])
            by_layer[obj.layer].append(obj)
    return MapLayerSet(masks, tuple(names), objects=by_layer)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def degrade_layers(layers: MapLayerSet, p_drop: float, jitter_px: int, dilate_erode_px: int,
                   seed) -> MapLayerSet:
    """Simulate map errors object by object.

    Each object is dropped with probability ``p_drop``; survivors are shifted
    by a uniform integer offset in ``[-jitter_px, jitter_px]`` per axis and
    then dilated (positive ``dilate_erode_px``) or eroded (negative) by a
    disk.  Requires the per-object footprints recorded in ``layers.objects``.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0, 1]")
    if jitter_px < 0:
        raise ValueError("jitter_px must be non-negative")
    if p_drop == 0.0 and jitter_px == 0 and dilate_erode_px == 0:
        return MapLayerSet(layers.masks.copy(), layers.layer_names, layers.encoding, dict(layers.objects))
    rng = np.random.default_rng(seed)
    shape = layers.masks.shape[1:]
    masks = np.zeros_like(layers.masks)
    kept: dict[str, list[MapObject]] = {}
    for li, name in enumerate(layers.layer_names):
        kept[name] = []
        for obj in layers.objects.get(name, []):
            drop = rng.random() < p_drop
            dy, dx = rng.integers(-jitter_px, jitter_px + 1, size=2)
            if drop:
                continue
            canvas = np.zeros(shape, dtype=bool)
            obj.paste(canvas, dy=int(dy), dx=int(dx))
            if dilate_erode_px > 0:
                canvas = ndimage.binary_dilation(canvas, _disk(dilate_erode_px))
            elif dilate_erode_px < 0:
                canvas = ndimage.binary_erosion(canvas, _disk(-dilate_erode_px))
            masks[li] |= canvas
            moved = _crop(canvas, obj.label, obj.layer)
            if moved is not None:
                kept[name].append(moved)
    return MapLayerSet(masks, layers.layer_names, layers.encoding, kept)


def sparsify_labels(labels: LabelMap, keep_fraction: float, seed) -> LabelMap:
    """Keep random rectangles of annotation until about ``keep_fraction`` remains."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    values = labels.values
    if keep_fraction == 1.0:
        return LabelMap(values.copy())
    rng = np.random.default_rng(seed)
    h, w = values.shape
    keep = np.zeros((h, w), dtype=bool)
    target = keep_fraction * h * w
    lo_h, hi_h = max(h // 16, 1), max(h // 6, 2)
    lo_w, hi_w = max(w // 16, 1), max(w // 6, 2)
    covered = 0
    while covered < target:
        rh, rw = int(rng.integers(lo_h, hi_h + 1)), int(rng.integers(lo_w, hi_w + 1))
        top, left = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        patch = keep[top:top + rh, left:left + rw]
        # rectangles are at most (1/6)^2 of the scene, which bounds the overshoot
        covered += patch.size - int(patch.sum())
        patch[:] = True
    out = np.where(keep, values, UNDEFINED).astype(np.uint8)
    return LabelMap(out)


# --------------------------------------------------------------------- scenes


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene for ``spec``: optical image, degraded layers, labels."""
    seq = np.random.SeedSequence(spec.seed)
    layout_rng, render_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    degrade_seed, sparse_seed = seq.spawn(4)[2:]
    objects = _layout(spec, layout_rng)
    optical, labels = _render(spec, objects, render_rng)
    clean = rasterize_layers(objects, labels.shape)
    layers = degrade_layers(clean, spec.p_drop, spec.jitter_px, spec.dilate_erode_px, degrade_seed)
    label_map = LabelMap(labels, len(CLASSES))
    if spec.keep_fraction < 1.0:
        label_map = sparsify_labels(label_map, spec.keep_fraction, sparse_seed)
    return Scene(MultiChannelRaster(optical), layers, label_map, spec, objects)


def scene_seed(dataset_seed: int, index: int) -> int:
    state = np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1, np.uint64)
    return int(state[0])


# -------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    classes: tuple
    layer_names: tuple
    train: list
    test: list
    ids: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def make_dataset(n_train: int = 20, n_test: int = 6, size: int = 256, seed: int = 0,
                 p_drop: float = 0.15, jitter_px: int = 2, dilate_erode_px: int = 0,
                 keep_fraction: float = 1.0, channels: int = 3, **spec_kwargs) -> Dataset:
    """Build ``n_train + n_test`` scenes; scene ``i`` is seeded from ``(seed, i)``."""
    scenes, ids = [], []
    for i in range(n_train + n_test):
        spec = SceneSpec(seed=scene_seed(seed, i), size=size, channels=channels, p_drop=p_drop,
                         jitter_px=jitter_px, dilate_erode_px=dilate_erode_px,
                         keep_fraction=keep_fraction, **spec_kwargs)
        scenes.append(generate_scene(spec))
        ids.append(f"{i:04d}")
    meta = {"seed": seed, "size": size, "p_drop": p_drop, "jitter_px": jitter_px,
            "dilate_erode_px": dilate_erode_px, "keep_fraction": keep_fraction, "channels": channels}
    return Dataset(CLASSES, DEFAULT_LAYERS, scenes[:n_train], scenes[n_train:],
                   {"train": ids[:n_train], "test": ids[n_train:]}, meta)


def save_dataset(ds: Dataset, root) -> Path:
    """Write ``dataset.json`` plus ``scenes/<id>/`` rasters and manifests."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        for sid, scene in zip(ds.ids[split], getattr(ds, split)):
            d = root / "scenes" / sid
            d.mkdir(parents=True, exist_ok=True)
            write_raster(scene.optical, d / "optical.mfr")
            for name in ds.layer_names:
                write_mask(scene.layers.layer(name), d / f"layer_{name}.mfr")
            write_labels(scene.labels, d / "labels.mfr")
            manifest = {
                "optical": "optical.mfr",
                "layers": {name: f"layer_{name}.mfr" for name in ds.layer_names},
                "layer_order": list(ds.layer_names),
                "labels": "labels.mfr",
                "seed": scene.spec.seed,
                "classes": list(ds.classes),
                "spec": scene.spec.to_dict(),
            }
            (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    index = {
        "generator_version": GENERATOR_VERSION,
        "classes": list(ds.classes),
        "layers": list(ds.layer_names),
        "splits": {k: list(v) for k, v in ds.ids.items()},
        "params": ds.meta,
    }
    (root / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        # the manifest is written with sorted keys, so channel order is stored separately
        names = tuple(manifest.get("layer_order", manifest["layers"]))
        masks = [read_mask(d / manifest["layers"][n]) for n in names]
        optical = read_raster(d / manifest["optical"])
        labels = read_labels(d / manifest["labels"])
        spec = SceneSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad scene manifest in {d}: {exc}") from None
    layers = MapLayerSet(np.stack(masks), names)
    return Scene(optical, layers, labels, spec)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        index = json.loads((root / "dataset.json").read_text())
        splits = index["splits"]
        classes, layers = tuple(index["classes"]), tuple(index["layers"])
    except FileNotFoundError:
        raise
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad dataset.json: {exc}") from None
    train = [load_scene(root / "scenes" / sid) for sid in splits.get("train", [])]
    test = [load_scene(root / "scenes" / sid) for sid in splits.get("test", [])]
    return Dataset(classes, layers, train, test, {k: list(v) for k, v in splits.items()},
                   index.get("params", {}))


def with_degradation(spec: SceneSpec, **changes) -> SceneSpec:
    return replace(spec, **changes)
