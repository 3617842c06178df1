"""Raster containers, map-layer encodings and the MFR1 file format.

The signed distance transform is exact: squared Euclidean distances are
computed with the separable lower-envelope algorithm of Felzenszwalb &
Huttenlocher (one column pass, one row pass).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError, LabelError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

UNDEFINED = 255
DEFAULT_LAYERS = ("roads", "buildings", "vegetation", "water")
DEFAULT_TRUNCATION = 32.0
_INF = 1e20


@dataclass
class LabelMap:
    """H x W class ids; 255 marks undefined pixels."""

    values: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise DimensionError("label map must be 2-D")
        if self.num_classes is not None:
            if not 1 <= self.num_classes <= 254:
                raise LabelError("number of classes must be in 1..254")
            bad = (self.values >= self.num_classes) & (self.values != UNDEFINED)
            if bad.any():
                raise LabelError(f"class id {int(self.values[bad][0])} >= {self.num_classes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def defined_fraction(self) -> float:
        return float(np.count_nonzero(self.values != UNDEFINED)) / self.values.size


@dataclass
class MultiChannelRaster:
    """C x H x W float32 raster."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise DimensionError("raster must be C x H x W with C >= 1")
        if not np.isfinite(self.data).all():
            raise ValueError("raster contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class MapLayerSet:
    """Named binary masks rasterised from vector map data."""

    masks: np.ndarray
    layer_names: tuple[str, ...] = DEFAULT_LAYERS
    encoding: str = "binary"
    objects: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=bool)
        self.layer_names = tuple(self.layer_names)
        if self.masks.ndim != 3 or self.masks.shape[0] != len(self.layer_names):
            raise DimensionError("masks must be L x H x W with one name per layer")
        if self.encoding not in ("binary", "sdt"):
            raise ValueError(f"unknown encoding {self.encoding!r}")

    def __eq__(self, other):
        if not isinstance(other, MapLayerSet):
            return NotImplemented
        return (self.layer_names == other.layer_names and self.encoding == other.encoding
                and np.array_equal(self.masks, other.masks))

    def layer(self, name: str) -> np.ndarray:
        return self.masks[self.layer_names.index(name)]

    def encode(self, tau: float = DEFAULT_TRUNCATION) -> MultiChannelRaster:
        if self.encoding == "sdt":
            return encode_sdt(self, tau)
        return encode_binary(self)


# ------------------------------------------------------------------ encoding


def encode_binary(layers: MapLayerSet) -> MultiChannelRaster:
    """One 0/1 channel per layer, in ``layer_names`` order."""
    return MultiChannelRaster(layers.masks.astype(np.float32))


def encode_sdt(layers: MapLayerSet, tau: float = DEFAULT_TRUNCATION) -> MultiChannelRaster:
    return MultiChannelRaster(np.stack([signed_distance_transform(m, tau) for m in layers.masks]))


@njit(cache=True)
def _envelope_1d(f, out, v, z):
    """Squared-distance lower envelope of parabolas rooted at (q, f[q])."""
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= _INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -_INF
            z[1] = _INF
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -_INF if k == 0 else s
        z[k + 1] = _INF
    if k < 0:
        for q in range(n):
            out[q] = _INF
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


@njit(cache=True)
def _squared_edt(seeds):
    """Squared distance from every pixel to the nearest True pixel of ``seeds``."""
    h, w = seeds.shape
    n = max(h, w)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    tmp = np.empty((h, w))
    for x in range(w):
        for y in range(h):
            f[y] = 0.0 if seeds[y, x] else _INF
        _envelope_1d(f[:h], out[:h], v, z)
        for y in range(h):
            tmp[y, x] = out[y]
    result = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            f[x] = tmp[y, x]
        _envelope_1d(f[:w], out[:w], v, z)
        for x in range(w):
            result[y, x] = out[x]
    return result


def squared_distance_to(seeds: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest ``True`` pixel.

    Pixels are at integer coordinates; with no seeds at all every distance
    is reported as ``inf``.
    """
    seeds = np.ascontiguousarray(seeds, dtype=np.bool_)
    if seeds.ndim != 2:
        raise DimensionError("expected a 2-D mask")
    if not seeds.any():
        return np.full(seeds.shape, np.inf)
    return _squared_edt(seeds)


def signed_distance_transform(mask: np.ndarray, tau: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """Truncated, normalised signed Euclidean distance to the mask boundary.

    Inside pixels get ``+d`` where ``d`` is the distance to the nearest
    outside pixel (the ring just beyond the grid counts as outside); outside
    pixels get ``-d`` with ``d`` the distance to the nearest inside pixel.
    Values are clamped to ``[-tau, tau]`` and divided by ``tau``.
    """
    if tau <= 0:
        raise ValueError("truncation must be positive")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded_out = np.ones((h + 2, w + 2), dtype=bool)
    padded_out[1:-1, 1:-1] = ~mask
    inside = np.sqrt(squared_distance_to(padded_out))[1:-1, 1:-1]
    outside = np.sqrt(squared_distance_to(mask))
    signed = np.where(mask, inside, -outside)
    return (np.clip(signed, -tau, tau) / tau).astype(np.float32)


# -------------------------------------------------------------- preprocessing


def clip_high_percentile(raster: MultiChannelRaster, fraction: float = 0.02) -> MultiChannelRaster:
    """Cap each channel at its ``1 - fraction`` quantile (linear interpolation).

    A channel whose top order statistics above the quantile position already
    share the maximum value is left alone, which makes clipping idempotent.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    data = raster.data.copy()
    for c in range(data.shape[0]):
        values = np.sort(data[c].ravel())
        n = values.size
        first_above = int(np.floor((1.0 - fraction) * (n - 1))) + 1
        if first_above >= n or values[first_above] == values[-1]:
            continue
        cap = np.quantile(values.astype(np.float64), 1.0 - fraction, method="linear")
        np.minimum(data[c], np.float32(cap), out=data[c])
    return MultiChannelRaster(data)


def erode_labels(labels: LabelMap | np.ndarray, radius: float = 3) -> LabelMap:
    """Mark pixels within ``radius`` of a differently-labelled pixel undefined."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    values = labels.values if isinstance(labels, LabelMap) else np.asarray(labels, dtype=np.uint8)
    out = values.copy()
    if radius == 0:
        return LabelMap(out)
    defined = values != UNDEFINED
    classes = np.unique(values[defined])
    if classes.size < 2:
        return LabelMap(out)
    limit = float(radius) ** 2
    for c in classes:
        own = values == c
        others = defined & ~own
        near = squared_distance_to(others) <= limit
        out[own & near] = UNDEFINED
    return LabelMap(out)


# ---------------------------------------------------------------------- I/O

_MAGIC = b"MFR1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def encode_array(arr: np.ndarray) -> bytes:
    if arr.dtype == np.uint8:
        code = 1
    else:
        code = 0
        arr = arr.astype("<f4")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    if any(d >= 2 ** 32 for d in arr.shape):
        raise FormatError("dimension overflows u32")
    header = _MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_array(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise FormatError("not an MFR1 raster (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if len(blob) < 6 + 4 * rank:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    start = 6 + 4 * rank
    expected = start + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(f"payload size {len(blob) - start} does not match dims {dims}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_raster(raster: MultiChannelRaster, path) -> None:
    Path(path).write_bytes(encode_array(raster.data.astype(np.float32)))


def read_raster(path) -> MultiChannelRaster:
    arr = decode_array(Path(path).read_bytes())
    if arr.dtype != np.float32 or arr.ndim != 3:
        raise FormatError("expected a rank-3 f32 raster")
    return MultiChannelRaster(arr)


def write_labels(labels: LabelMap, path) -> None:
    Path(path).write_bytes(encode_array(labels.values))


def read_labels(path) -> LabelMap:
    arr = decode_array(Path(path).read_bytes())
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise FormatError("expected a rank-2 u8 label map")
    return LabelMap(arr)


def write_mask(mask: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_array(np.asarray(mask, dtype=np.uint8)))


def read_mask(path) -> np.ndarray:
    arr = decode_array(Path(path).read_bytes())
    if arr.dtype != np.uint8 or arr.ndim != 2 or arr.max(initial=0) > 1:
        raise FormatError("expected a rank-2 binary u8 mask")
    return arr.astype(bool)


def stack_layers(masks: Sequence[np.ndarray], names: Sequence[str] = DEFAULT_LAYERS,
                 encoding: str = "binary") -> MapLayerSet:
    return MapLayerSet(np.stack([np.asarray(m, dtype=bool) for m in masks]), tuple(names), encoding)
