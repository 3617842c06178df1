"""Sliding-window prediction over tiles larger than the network's window."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .models import ArchSpec, Module
from .tensor import Tensor, bilinear_resize, softmax
from .training import SceneArrays, forward_scores

# colours per class: impervious, building, low veg, tree, car, clutter
PALETTE = np.array([
    [255, 255, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.uint8)
UNDEFINED_COLOR = np.array([0, 0, 0], dtype=np.uint8)


def _axis_origins(size: int, window: int, stride: int) -> list[int]:
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


@dataclass(frozen=True)
class TilingPlan:
    tile_hw: tuple[int, int]
    window: int
    stride: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(y, x) for y in self.rows for x in self.cols]

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)

    def coverage(self) -> np.ndarray:
        counts = np.zeros(self.tile_hw, dtype=np.int64)
        for y, x in self.origins:
            counts[y:y + self.window, x:x + self.window] += 1
        return counts


def plan_tiling(tile_hw, window: int = 128, stride: int = 64) -> TilingPlan:
    """Window origins on a stride grid, the last one clamped to the tile edge."""
    h, w = tile_hw
    if window > h or window > w:
        raise DimensionError(f"window {window} larger than tile {h}x{w}")
    if not 0 < stride <= window:
        raise DimensionError("stride must lie in (0, window]")
    return TilingPlan((h, w), window, stride, tuple(_axis_origins(h, window, stride)),
                      tuple(_axis_origins(w, window, stride)))


def upsample_coarse(scores: np.ndarray, target_hw) -> np.ndarray:
    """Bilinear upsampling of a K x h x w score map to K x H x W."""
    k, h, w = scores.shape
    th, tw = target_hw
    if th < h or tw < w:
        raise DimensionError("target must not be smaller than the score map")
    return bilinear_resize(Tensor(scores[None]), (th, tw)).data[0]


def predict_tile(model: Module, arch: ArchSpec, scene: SceneArrays, plan: TilingPlan,
                 batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Average softmax probabilities of all windows covering each pixel.

    Returns ``(probabilities K x H x W, labels H x W)``; windows are
    accumulated strictly in plan order, labels use the lowest class id on ties.
    """
    if scene.hw != plan.tile_hw:
        raise DimensionError(f"plan built for {plan.tile_hw}, tile is {scene.hw}")
    model.eval()
    h, w = plan.tile_hw
    win = plan.window
    total = np.zeros((arch.num_classes, h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    origins = plan.origins
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        optical = np.stack([scene.optical[:, y:y + win, x:x + win] for y, x in chunk])
        layers = np.stack([scene.layers[:, y:y + win, x:x + win] for y, x in chunk])
        scores = forward_scores(model, arch, optical, layers, (win, win)).data
        probs = softmax(scores, axis=1)
        for (y, x), p in zip(chunk, probs):
            total[:, y:y + win, x:x + win] += p
            count[y:y + win, x:x + win] += 1
    probs = (total / count[None]).astype(np.float32)
    return probs, probs.argmax(axis=0).astype(np.uint8)


def color_composite(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """H x W x 3 uint8 image; undefined or out-of-palette ids are black."""
    out = np.zeros((*labels.shape, 3), dtype=np.uint8)
    known = labels < len(palette)
    out[known] = palette[labels[known]]
    return out
