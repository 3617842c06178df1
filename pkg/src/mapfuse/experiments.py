"""Ablation harness: train every (model, encoding, seed, degradation) cell and compare."""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .inference import plan_tiling, predict_tile
from .metrics import ConfusionMatrix, accumulate, report_from_cm
from .rasters import erode_labels
from .scenegen import Dataset, degrade_layers, rasterize_layers, scene_seed
from .training import TrainConfig, TrainLog, scene_arrays, train

log = logging.getLogger(__name__)

ABLATION_KINDS = {
    "segnet_only": "segnet",
    "osmnet_only": "osmnet",
    "average": "average",
    "residual_correction": "rescorr",
    "fusenet": "fusenet",
}
SINGLE_STREAM = "segnet_only"
FUSED = ("average", "residual_correction", "fusenet")


@dataclass
class AblationSpec:
    models: list = field(default_factory=lambda: ["segnet_only", "fusenet"])
    encodings: list = field(default_factory=lambda: ["binary"])
    seeds: list = field(default_factory=lambda: [0])
    degradations: list = field(default_factory=lambda: [None])
    config: TrainConfig = field(default_factory=TrainConfig)
    dataset_id: str = "synthetic"
    erode_radius: float = 3
    window: int | None = None
    stride: int | None = None

    def __post_init__(self):
        if not self.models or not self.seeds:
            raise ValueError("an ablation needs at least one model and one seed")
        unknown = set(self.models) - set(ABLATION_KINDS)
        if unknown:
            raise ValueError(f"unknown model kinds {sorted(unknown)}")
        bad = set(self.encodings) - {"binary", "sdt"}
        if bad or not self.encodings:
            raise ValueError("encodings must be a non-empty subset of {binary, sdt}")

    def cells(self):
        for degradation in self.degradations:
            for model in self.models:
                encodings = ["none"] if model == SINGLE_STREAM else self.encodings
                for encoding in encodings:
                    for seed in self.seeds:
                        yield model, encoding, seed, degradation


def convergence_ratio(log_fused: TrainLog, log_single: TrainLog, target_oa: float) -> float | None:
    """Iterations the fused model needs to reach ``target_oa`` over the single-stream count.

    ``None`` means one of the runs never reached the target.
    """
    fused = log_fused.iterations_to_target(target_oa)
    single = log_single.iterations_to_target(target_oa)
    if fused is None or single is None:
        return None
    return fused / single


def redegrade(dataset: Dataset, p_drop: float, jitter_px: int, dilate_erode_px: int = 0) -> Dataset:
    """Copy of ``dataset`` whose map layers are re-derived from the clean objects."""
    def redo(scene, index):
        if not scene.objects:
            raise ValueError("re-degrading needs scenes generated in memory (object lists)")
        clean = rasterize_layers(scene.objects, scene.labels.shape, dataset.layer_names)
        seed = np.random.SeedSequence([scene_seed(scene.spec.seed, index), 0xD06])
        layers = degrade_layers(clean, p_drop, jitter_px, dilate_erode_px, seed)
        return replace(scene, layers=layers)

    train_ = [redo(s, i) for i, s in enumerate(dataset.train)]
    test_ = [redo(s, i + len(train_)) for i, s in enumerate(dataset.test)]
    meta = {**dataset.meta, "p_drop": p_drop, "jitter_px": jitter_px, "dilate_erode_px": dilate_erode_px}
    return Dataset(dataset.classes, dataset.layer_names, train_, test_, dataset.ids, meta)


def evaluate_tiled(model, arch, scenes, classes, window, stride, erode_radius, tau):
    cm = ConfusionMatrix(len(classes))
    for scene in scenes:
        arrays = scene_arrays(scene, arch.encoding, tau)
        plan = plan_tiling(arrays.hw, window, stride)
        _, labels = predict_tile(model, arch, arrays, plan)
        ref = erode_labels(scene.labels, erode_radius) if erode_radius > 0 else scene.labels
        accumulate(cm, labels, ref)
    return cm


@dataclass
class AblationReport:
    dataset_id: str
    classes: list
    cells: list
    convergence: list
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"dataset_id": self.dataset_id, "classes": self.classes, "cells": self.cells,
             "convergence": self.convergence, "summary": self.summary()}
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def select(self, model: str, encoding: str | None = None, degradation=None) -> list[dict]:
        return [c for c in self.cells if c["model"] == model
                and (encoding is None or c["encoding"] == encoding)
                and (degradation is None or c["degradation"] == degradation)]

    def median_oa(self, model: str, encoding: str | None = None, degradation=None) -> float | None:
        vals = [c["report"]["overall_accuracy"] for c in self.select(model, encoding, degradation)
                if c["report"] is not None]
        return statistics.median(vals) if vals else None

    def median_f1(self, model: str, class_index: int, encoding: str | None = None) -> float | None:
        vals = [c["report"]["f1"][class_index] for c in self.select(model, encoding)
                if c["report"] is not None and c["report"]["f1"][class_index] is not None]
        return statistics.median(vals) if vals else None

    def convergence_ratios(self, model: str = "fusenet", encoding: str | None = None) -> list:
        return [c["ratio"] for c in self.convergence
                if c["fused_model"] == model and (encoding is None or c["encoding"] == encoding)]

    def summary(self) -> list[dict]:
        rows = {}
        for c in self.cells:
            key = (c["model"], c["encoding"], json.dumps(c["degradation"], sort_keys=True))
            rows.setdefault(key, []).append(c)
        out = []
        for (model, encoding, deg), cells in rows.items():
            reports = [c["report"] for c in cells if c["report"] is not None]
            f1 = []
            for i in range(len(self.classes)):
                vals = [r["f1"][i] for r in reports if r["f1"][i] is not None]
                f1.append(statistics.median(vals) if vals else None)
            oas = [r["overall_accuracy"] for r in reports]
            out.append({"model": model, "encoding": encoding, "degradation": json.loads(deg),
                        "seeds": len(cells), "median_f1": f1,
                        "median_oa": statistics.median(oas) if oas else None})
        return out

    def to_markdown(self) -> str:
        head = ["Map input", "Method", *self.classes, "Overall"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        pct = lambda v: "-" if v is None else f"{100 * v:.1f}"
        for row in self.summary():
            enc = {"none": "none", "binary": "Binary", "sdt": "SDT"}[row["encoding"]]
            method = row["model"]
            if row["degradation"]:
                method += " " + ",".join(f"{k}={v}" for k, v in sorted(row["degradation"].items()))
            cells = [pct(v) for v in row["median_f1"]] + [pct(row["median_oa"])]
            lines.append("| " + " | ".join([enc, method, *cells]) + " |")
        ratios = [c for c in self.convergence]
        if ratios:
            lines.append("")
            lines.append("| Fused model | Encoding | Seed | Target OA | Iterations ratio |")
            lines.append("|---|---|---|---|---|")
            for c in ratios:
                r = "unreachable" if c["ratio"] is None else f"{c['ratio']:.3f}"
                lines.append(f"| {c['fused_model']} | {c['encoding']} | {c['seed']} | "
                             f"{pct(c['target_oa'])} | {r} |")
        return "\n".join(lines) + "\n"


def run_ablation(spec: AblationSpec, dataset: Dataset, progress=None) -> AblationReport:
    """Train and evaluate every cell; failures are recorded, never raised."""
    cfg = spec.config
    window = spec.window or cfg.patch_size
    stride = spec.stride or window // 2
    variants: dict[str, Dataset] = {}
    cells, logs, timing = [], {}, {}
    for model, encoding, seed, degradation in spec.cells():
        deg_key = json.dumps(degradation, sort_keys=True)
        if deg_key not in variants:
            variants[deg_key] = dataset if degradation is None else redegrade(dataset, **degradation)
        ds = variants[deg_key]
        kind = ABLATION_KINDS[model]
        run_cfg = replace(cfg, seed=int(seed))
        enc = "binary" if encoding == "none" else encoding
        cell = {"model": model, "encoding": encoding, "seed": int(seed), "degradation": degradation,
                "status": "ok", "report": None, "train": None}
        log.info("ablation cell %s/%s seed %s degradation %s", model, encoding, seed, degradation)
        trained, arch, tlog = train(kind, ds, run_cfg, enc)
        cell["train"] = tlog.summary(include_clock=False)
        timing[f"{model}/{encoding}/{seed}/{deg_key}"] = tlog.wall_clock
        if tlog.status != "ok":
            cell["status"] = "diverged"
        else:
            cm = evaluate_tiled(trained, arch, ds.test, ds.classes, window, stride,
                                spec.erode_radius, cfg.tau)
            meta = {"model": model, "encoding": encoding, "seed": int(seed),
                    "dataset": spec.dataset_id, "degradation": degradation}
            cell["report"] = report_from_cm(cm, ds.classes, spec.erode_radius, meta).to_dict()
        logs[(model, encoding, int(seed), deg_key)] = tlog
        cells.append(cell)
        if progress is not None:
            progress(cell)

    convergence = []
    for (model, encoding, seed, deg_key), tlog in logs.items():
        if model not in FUSED:
            continue
        single = logs.get((SINGLE_STREAM, "none", seed, deg_key))
        if single is None or single.final_oa is None or tlog.status != "ok":
            continue
        target = single.final_oa
        ratio = convergence_ratio(tlog, single, target)
        convergence.append({"fused_model": model, "encoding": encoding, "seed": seed,
                            "degradation": json.loads(deg_key), "target_oa": target,
                            "fused_iterations": tlog.iterations_to_target(target),
                            "single_iterations": single.iterations_to_target(target),
                            "ratio": ratio})
        if ratio is None:
            for cell in cells:
                if (cell["model"], cell["encoding"], cell["seed"]) == (model, encoding, seed) \
                        and json.dumps(cell["degradation"], sort_keys=True) == deg_key:
                    cell["status"] = "unreachable"
    return AblationReport(spec.dataset_id, list(dataset.classes), cells, convergence, timing)
