"""Patch sampling, augmentation, learning-rate schedules and the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import NumericError, SamplingError
from .metrics import ConfusionMatrix, accumulate
from .models import ArchSpec, Module, build_model, encoder_modules, run_model
from .optim import SGD, Adam
from .rasters import DEFAULT_TRUNCATION, UNDEFINED, erode_labels
from .tensor import Tensor, bilinear_resize, masked_softmax_cross_entropy

log = logging.getLogger(__name__)

MAX_SAMPLING_ATTEMPTS = 100


@dataclass
class TrainConfig:
    patch_size: int = 128
    batch_size: int = 10
    optimizer: str = "sgd"
    base_lr: float = 0.01
    lr_decay_every: int = 2
    lr_decay_factor: float = 10.0
    epochs: float = 6
    iterations: int | None = None
    epoch_iterations: int | None = None
    # fraction of the run after which Adam's rate drops by lr_decay_factor (0 keeps it constant)
    adam_anneal_at: float = 0.0
    min_annotated_fraction: float = 0.0
    augment: bool = True
    seed: int = 0
    encoder_lr_ratio: float = 0.5
    widths: list = field(default_factory=lambda: [16, 32, 64])
    decoder_trunc: int = 0
    batchnorm: bool = True
    tau: float = DEFAULT_TRUNCATION
    eval_every: int = 50
    eval_erode: float = 3

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if not 0.0 <= self.min_annotated_fraction <= 1.0:
            raise ValueError("min_annotated_fraction must lie in [0, 1]")
        if not 0.0 <= self.adam_anneal_at < 1.0:
            raise ValueError("adam_anneal_at must lie in [0, 1)")
        if self.patch_size % (2 ** len(self.widths)):
            raise ValueError(f"patch_size must be divisible by {2 ** len(self.widths)}")
        self.widths = [int(w) for w in self.widths]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Step schedule for SGD (divide every ``lr_decay_every`` epochs); Adam stays constant."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if config.optimizer == "adam":
        return config.base_lr
    return config.base_lr * config.lr_decay_factor ** (-math.floor(epoch / config.lr_decay_every))


def epoch_length(scenes, config: TrainConfig) -> int:
    """Batches per epoch: labelled pixels / (patch area x batch size), rounded up."""
    if config.epoch_iterations:
        return int(config.epoch_iterations)
    labelled = sum(int(np.count_nonzero(s.labels.values != UNDEFINED)) for s in scenes)
    return max(1, math.ceil(labelled / (config.patch_size ** 2 * config.batch_size)))


# ------------------------------------------------------------------- patches


@dataclass
class SceneArrays:
    """Network-ready arrays for one scene."""

    optical: np.ndarray
    layers: np.ndarray
    labels: np.ndarray

    @property
    def hw(self) -> tuple[int, int]:
        return self.labels.shape


def scene_arrays(scene, encoding: str = "binary", tau: float = DEFAULT_TRUNCATION) -> SceneArrays:
    layers = scene.layers
    encoded = layers.encode(tau) if encoding == layers.encoding else _reencode(layers, encoding, tau)
    return SceneArrays(scene.optical.data, encoded.data, scene.labels.values)


def _reencode(layers, encoding, tau):
    from .rasters import MapLayerSet
    return MapLayerSet(layers.masks, layers.layer_names, encoding).encode(tau)


def sample_patch(scene: SceneArrays, patch_size: int, min_annotated_fraction: float,
                 rng: np.random.Generator):
    """Random congruent crop of optical, layers and labels.

    Corners are drawn uniformly and redrawn until at least
    ``min_annotated_fraction`` of the label pixels are defined.
    """
    h, w = scene.hw
    if h < patch_size or w < patch_size:
        raise SamplingError(f"scene {h}x{w} smaller than patch {patch_size}")
    for _ in range(MAX_SAMPLING_ATTEMPTS):
        y = int(rng.integers(0, h - patch_size + 1))
        x = int(rng.integers(0, w - patch_size + 1))
        lab = scene.labels[y:y + patch_size, x:x + patch_size]
        if annotated_fraction(lab) >= min_annotated_fraction:
            return (scene.optical[:, y:y + patch_size, x:x + patch_size],
                    scene.layers[:, y:y + patch_size, x:x + patch_size],
                    lab)
    raise SamplingError(f"no patch with >= {min_annotated_fraction:.0%} annotated pixels "
                        f"after {MAX_SAMPLING_ATTEMPTS} attempts")


def annotated_fraction(labels: np.ndarray) -> float:
    return np.count_nonzero(labels != UNDEFINED) / labels.size


def augment(patches, rng: np.random.Generator, choice: int | None = None):
    """Apply one of {none, horizontal flip, vertical flip, both} to every modality."""
    if choice is None:
        choice = int(rng.integers(4))
    out = []
    for arr in patches:
        if choice & 1:
            arr = arr[..., ::-1]
        if choice & 2:
            arr = arr[..., ::-1, :]
        out.append(np.ascontiguousarray(arr))
    return tuple(out)


# ---------------------------------------------------------------------- logs


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val_iterations: list = field(default_factory=list)
    val_oa: list = field(default_factory=list)
    wall_clock: float = 0.0
    epoch_iterations: int = 0
    status: str = "ok"
    message: str = ""

    def iterations_to_target(self, target_oa: float) -> int | None:
        """First validated iteration whose OA reaches ``target_oa``; None if never."""
        for it, oa in zip(self.val_iterations, self.val_oa):
            if oa is not None and oa >= target_oa:
                return it
        return None

    @property
    def final_oa(self) -> float | None:
        return self.val_oa[-1] if self.val_oa else None

    def final_loss(self, window: int = 50) -> float | None:
        if not self.losses:
            return None
        return float(np.mean(self.losses[-window:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "loss", "lr"])
        for it, loss, lr in zip(self.iterations, self.losses, self.lrs):
            writer.writerow([it, repr(float(loss)), repr(float(lr))])
        return buf.getvalue()

    def summary(self, include_clock: bool = True) -> dict:
        d = {
            "iterations": len(self.iterations),
            "epoch_iterations": self.epoch_iterations,
            "final_loss": self.final_loss(),
            "final_val_oa": self.final_oa,
            "val_iterations": list(self.val_iterations),
            "val_oa": list(self.val_oa),
            "status": self.status,
            "message": self.message,
        }
        if include_clock:
            d["wall_clock_s"] = self.wall_clock
        return d


# ---------------------------------------------------------------------- loop


def arch_for(model_kind: str, dataset, config: TrainConfig, encoding: str = "binary") -> ArchSpec:
    first = (dataset.train or dataset.test)[0]
    return ArchSpec(kind=model_kind, in_channels=first.optical.channels,
                    map_channels=len(dataset.layer_names), num_classes=dataset.num_classes,
                    widths=list(config.widths), decoder_trunc=config.decoder_trunc,
                    batchnorm=config.batchnorm, encoding=encoding, seed=config.seed)


def forward_scores(model: Module, arch: ArchSpec, optical, layers, out_hw=None) -> Tensor:
    """Run the model and bring coarse scores back to ``out_hw`` bilinearly."""
    scores = run_model(model, arch, optical, layers)
    if out_hw is not None and scores.shape[2:] != tuple(out_hw):
        scores = bilinear_resize(scores, tuple(out_hw))
    return scores


def predict_scene(model: Module, arch: ArchSpec, scene: SceneArrays) -> np.ndarray:
    """Whole-scene argmax labels from a single forward pass (eval mode)."""
    was_training = model.training
    model.eval()
    try:
        h, w = scene.hw
        m = arch.size_multiple
        ph, pw = (-h) % m, (-w) % m
        opt = np.pad(scene.optical, ((0, 0), (0, ph), (0, pw)), mode="reflect")[None]
        lay = np.pad(scene.layers, ((0, 0), (0, ph), (0, pw)), mode="reflect")[None]
        scores = forward_scores(model, arch, opt, lay, (h + ph, w + pw)).data[0]
        return scores[:, :h, :w].argmax(axis=0).astype(np.uint8)
    finally:
        model.train(was_training)


def validation_oa(model, arch, scenes, erode_radius) -> float | None:
    cm = ConfusionMatrix(arch.num_classes)
    for s in scenes:
        ref = erode_labels(s.labels, erode_radius).values if erode_radius > 0 else s.labels
        accumulate(cm, predict_scene(model, arch, s), ref)
    return cm.overall_accuracy()


def train(model_kind: str, dataset, config: TrainConfig, encoding: str = "binary",
          val_scenes=None, progress=None):
    """Train one model end to end; returns ``(model, arch, log)``.

    Divergence (non-finite loss or gradients) stops training early with
    ``log.status == "diverged"`` instead of raising.
    """
    arch = arch_for(model_kind, dataset, config, encoding)
    model = build_model(arch)
    for enc in encoder_modules(model):
        enc.set_lr_scale(config.encoder_lr_ratio)
    params = model.parameters()
    opt = Adam(params) if config.optimizer == "adam" else SGD(params)

    train_arrays = [scene_arrays(s, encoding, config.tau) for s in dataset.train]
    if val_scenes is None:
        val_scenes = dataset.test
    val_arrays = [scene_arrays(s, encoding, config.tau) for s in val_scenes]
    per_epoch = epoch_length(dataset.train, config)
    total = config.iterations if config.iterations is not None else math.ceil(config.epochs * per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5eed]))

    tlog = TrainLog(epoch_iterations=per_epoch)
    start = time.perf_counter()
    model.train()
    p = config.patch_size
    for it in range(total):
        lr = lr_at(it / per_epoch, config)
        if config.optimizer == "adam" and config.adam_anneal_at and it >= config.adam_anneal_at * total:
            lr /= config.lr_decay_factor
        batch = []
        for _ in range(config.batch_size):
            scene = train_arrays[int(rng.integers(len(train_arrays)))]
            crop = sample_patch(scene, p, config.min_annotated_fraction, rng)
            batch.append(augment(crop, rng) if config.augment else crop)
        optical = np.stack([b[0] for b in batch])
        layers = np.stack([b[1] for b in batch])
        labels = np.stack([b[2] for b in batch])
        try:
            opt.zero_grad()
            scores = forward_scores(model, arch, optical, layers, (p, p))
            loss = masked_softmax_cross_entropy(scores, labels, UNDEFINED)
            loss.backward()
        except NumericError as exc:
            tlog.status, tlog.message = "diverged", f"iteration {it}: {exc}"
            log.warning("training diverged at iteration %d: %s", it, exc)
            break
        opt.step(lr)
        tlog.iterations.append(it)
        tlog.losses.append(float(loss.data))
        tlog.lrs.append(lr)
        done = it + 1
        if val_arrays and (done % config.eval_every == 0 or done == total):
            oa = validation_oa(model, arch, val_arrays, config.eval_erode)
            tlog.val_iterations.append(done)
            tlog.val_oa.append(oa)
            log.info("%s it %d loss %.4f val OA %.4f", model_kind, done, np.mean(tlog.losses[-config.eval_every:]), oa)
            if progress is not None:
                progress(done, tlog)
    tlog.wall_clock = time.perf_counter() - start
    model.eval()
    return model, arch, tlog


def write_train_outputs(run_dir, model, arch, tlog: TrainLog, config: TrainConfig) -> None:
    """Checkpoint, architecture descriptor, loss CSV and JSON summary."""
    from pathlib import Path

    from . import checkpoint

    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model.state_dict(), run / "model.mfw")
    (run / "arch.json").write_text(arch.to_json())
    (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (run / "train_log.csv").write_text(tlog.to_csv())
    summary = tlog.summary(include_clock=False)
    summary["sdt_normalisation"] = {"truncation_px": config.tau, "range": [-1, 1]}
    (run / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (run / "timing.json").write_text(json.dumps({"wall_clock_s": tlog.wall_clock}))


def load_trained(run_dir):
    from pathlib import Path

    from . import checkpoint

    run = Path(run_dir)
    arch = ArchSpec.from_json((run / "arch.json").read_text())
    model = build_model(arch)
    model.load_state_dict(checkpoint.load(run / "model.mfw"))
    model.eval()
    return model, arch
