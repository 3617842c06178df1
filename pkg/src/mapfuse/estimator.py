"""scikit-learn style wrappers around training, tiled inference and layer encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DimensionError
from .metrics import evaluate
from .rasters import DEFAULT_LAYERS, DEFAULT_TRUNCATION, UNDEFINED, LabelMap, MapLayerSet, MultiChannelRaster
from .scenegen import CLASSES, Dataset, Scene
from .training import TrainConfig, scene_arrays, train

ENCODINGS = ("binary", "sdt")


@dataclass
class _Sample:
    optical: MultiChannelRaster
    layers: MapLayerSet
    labels: LabelMap


def check_masks(masks) -> np.ndarray:
    """Validate one L x H x W stack of layer masks and return it as bool."""
    arr = np.asarray(masks)
    if arr.ndim != 3:
        raise DimensionError(f"layer masks must be L x H x W, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("layer masks must be boolean or 0/1 valued")
        arr = arr.astype(bool)
    return arr


def check_samples(X, y=None, num_classes: int | None = None, layer_names=DEFAULT_LAYERS) -> list[_Sample]:
    """Turn ``X`` (scenes or ``(optical, masks)`` pairs) and optional ``y`` into samples.

    Missing labels are filled with the undefined value so the same helper
    serves prediction.
    """
    if isinstance(X, (Scene, tuple)):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("need at least one sample")
    if y is not None:
        y = [y] if isinstance(y, np.ndarray) and y.ndim == 2 else list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Scene):
            optical, layers = item.optical, item.layers
            labels = item.labels.values if y is None else y[i]
        else:
            if len(item) != 2:
                raise ValueError("each sample must be a scene or an (optical, masks) pair")
            optical = MultiChannelRaster(np.asarray(item[0], dtype=np.float32))
            masks = check_masks(item[1])
            names = tuple(layer_names) if len(layer_names) == len(masks) else \
                tuple(f"layer{j}" for j in range(len(masks)))
            layers = MapLayerSet(masks, names)
            labels = None if y is None else y[i]
        hw = optical.shape[1:]
        if labels is None:
            labels = np.full(hw, UNDEFINED, dtype=np.uint8)
        labels = np.asarray(labels)
        if labels.shape != hw or layers.masks.shape[1:] != hw:
            raise DimensionError(f"sample {i}: optical, masks and labels must share H x W")
        k = num_classes if num_classes is not None else int(labels[labels != UNDEFINED].max(initial=0)) + 1
        out.append(_Sample(optical, layers, LabelMap(labels.astype(np.uint8), k)))
    channels = {s.optical.channels for s in out}
    n_layers = {len(s.layers.layer_names) for s in out}
    if len(channels) > 1 or len(n_layers) > 1:
        raise DimensionError("all samples must have the same band and layer counts")
    return out


class MapFusionSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel classifier fusing optical bands with rasterised map layers.

    ``fit`` takes a list of scenes (or ``(optical, masks)`` pairs plus label
    maps); ``predict`` returns one H x W label map per input.
    """

    def __init__(self, model="fusenet", encoding="binary", patch_size=64, batch_size=10,
                 optimizer="adam", base_lr=0.01, iterations=300, widths=(8, 16, 32),
                 decoder_trunc=0, min_annotated_fraction=0.0, tau=DEFAULT_TRUNCATION,
                 window=None, stride=None, erode_radius=3, seed=0):
        self.model = model
        self.encoding = encoding
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.iterations = iterations
        self.widths = widths
        self.decoder_trunc = decoder_trunc
        self.min_annotated_fraction = min_annotated_fraction
        self.tau = tau
        self.window = window
        self.stride = stride
        self.erode_radius = erode_radius
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(patch_size=self.patch_size, batch_size=self.batch_size,
                           optimizer=self.optimizer, base_lr=self.base_lr,
                           iterations=self.iterations, widths=list(self.widths),
                           decoder_trunc=self.decoder_trunc,
                           min_annotated_fraction=self.min_annotated_fraction,
                           tau=self.tau, seed=self.seed, eval_every=max(1, self.iterations))

    def fit(self, X, y=None, classes=None):
        if self.encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}")
        samples = check_samples(X, y)
        if classes is None:
            k = max(s.labels.num_classes for s in samples)
            classes = CLASSES if k <= len(CLASSES) else tuple(str(i) for i in range(k))
        self.classes_ = np.arange(len(classes))
        self.class_names_ = tuple(classes)
        samples = [_Sample(s.optical, s.layers, LabelMap(s.labels.values, len(classes))) for s in samples]
        self.layer_names_ = samples[0].layers.layer_names
        dataset = Dataset(self.class_names_, self.layer_names_, samples, [])
        self.network_, self.arch_, self.train_log_ = train(self.model, dataset, self._config(),
                                                           self.encoding, val_scenes=[])
        self.n_features_in_ = samples[0].optical.channels
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X) -> list[np.ndarray]:
        from .inference import plan_tiling, predict_tile

        self._check_fitted()
        out = []
        for s in check_samples(X, num_classes=len(self.classes_), layer_names=self.layer_names_):
            arrays = scene_arrays(s, self.encoding, self.tau)
            window = self.window or min(arrays.hw)
            window -= window % self.arch_.size_multiple
            plan = plan_tiling(arrays.hw, window, self.stride or max(1, window // 2))
            probs, _ = predict_tile(self.network_, self.arch_, arrays, plan)
            out.append(probs)
        return out

    def predict(self, X) -> list[np.ndarray]:
        return [p.argmax(axis=0).astype(np.uint8) for p in self.predict_proba(X)]

    def score(self, X, y=None, sample_weight=None) -> float:
        """Overall accuracy after eroding reference borders by ``erode_radius``."""
        samples = check_samples(X, y, num_classes=len(self.classes_), layer_names=self.layer_names_)
        preds = self.predict(X)
        report = evaluate(preds, [s.labels for s in samples], self.erode_radius, self.class_names_)
        return float(report.overall_accuracy) if report.overall_accuracy is not None else float("nan")


class MapLayerEncoder(TransformerMixin, BaseEstimator):
    """Binary or truncated signed-distance encoding of layer mask stacks."""

    def __init__(self, encoding="binary", tau=DEFAULT_TRUNCATION):
        self.encoding = encoding
        self.tau = tau

    def fit(self, X, y=None):
        if self.encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        stacks = self._stacks(X)
        self.n_layers_ = stacks[0].shape[0]
        return self

    @staticmethod
    def _stacks(X) -> list[np.ndarray]:
        arr = X if isinstance(X, (list, tuple)) else [X]
        return [check_masks(m) for m in arr]

    def transform(self, X):
        if not hasattr(self, "n_layers_"):
            raise NotFittedError("call fit before transform")
        single = not isinstance(X, (list, tuple))
        out = []
        for masks in self._stacks(X):
            if masks.shape[0] != self.n_layers_:
                raise DimensionError(f"expected {self.n_layers_} layers, got {masks.shape[0]}")
            names = tuple(f"layer{j}" for j in range(len(masks)))
            out.append(MapLayerSet(masks, names, self.encoding).encode(self.tau).data)
        return out[0] if single else out
