"""Command line entry point: ``mapfuse {gen,train,predict,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (divergence, NaN).  Values given on the command line take precedence
over values read from a ``--config`` file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import (CorruptionError, DimensionError, FormatError, LabelError, NumericError,
                     SamplingError, UsageError)

log = logging.getLogger("mapfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_CHOICES = ("segnet", "osmnet", "average", "rescorr", "fusenet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def _threads(args) -> int | None:
    value = args.threads if args.threads is not None else os.environ.get("MAPFUSE_THREADS")
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("thread count must be positive")
    return n


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _train_config(args):
    from .training import TrainConfig

    cfg = _read_json(args.config)
    for key in ("seed", "iterations"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    from .scenegen import make_dataset, save_dataset

    params = _read_json(args.config)
    overrides = {"seed": args.seed, "size": args.size, "p_drop": args.p_drop,
                 "jitter_px": args.jitter, "keep_fraction": args.keep_fraction}
    params.update({k: v for k, v in overrides.items() if v is not None})
    scenes = args.scenes if args.scenes is not None else params.pop("scenes", 26)
    n_test = args.test if args.test is not None else params.pop("test", max(1, round(scenes * 6 / 26)))
    params.pop("scenes", None)
    params.pop("test", None)
    if not 0 < n_test < scenes:
        raise UsageError("need at least one training and one test scene")
    try:
        ds = make_dataset(n_train=scenes - n_test, n_test=n_test, **params)
    except TypeError as exc:
        raise UsageError(f"bad generator parameters: {exc}") from None
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "train": len(ds.train), "test": len(ds.test)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .scenegen import load_dataset
    from .training import train, write_train_outputs

    config = _train_config(args)
    dataset = load_dataset(args.data)
    model, arch, tlog = train(args.model, dataset, config, args.encoding)
    write_train_outputs(args.out, model, arch, tlog, config)
    print(json.dumps(tlog.summary(include_clock=False), sort_keys=True))
    if tlog.status != "ok":
        print(f"error: training diverged ({tlog.message})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _select_scenes(data, ids):
    from .scenegen import load_dataset

    ds = load_dataset(data)
    pairs = list(zip(ds.ids.get("test", []), ds.test))
    if ids:
        known = dict(zip(ds.ids.get("train", []), ds.train)) | dict(pairs)
        missing = [i for i in ids if i not in known]
        if missing:
            raise FileNotFoundError(f"scene ids not in dataset: {missing}")
        pairs = [(i, known[i]) for i in ids]
    return pairs


def cmd_predict(args) -> int:
    from .inference import color_composite, plan_tiling, predict_tile
    from .metrics import write_ppm
    from .rasters import LabelMap, MultiChannelRaster, write_labels, write_raster
    from .training import load_trained, scene_arrays

    model, arch = load_trained(args.run)
    tau = _read_json(Path(args.run) / "config.json").get("tau", 32.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid, scene in _select_scenes(args.data, args.scene):
        arrays = scene_arrays(scene, arch.encoding, tau)
        plan = plan_tiling(arrays.hw, args.window, args.stride)
        probs, labels = predict_tile(model, arch, arrays, plan)
        write_raster(MultiChannelRaster(probs), out / f"{sid}_scores.mfr")
        write_labels(LabelMap(labels, arch.num_classes), out / f"{sid}_labels.mfr")
        write_ppm(color_composite(labels), out / f"{sid}_labels.ppm")
        written.append(sid)
    print(json.dumps({"out": str(out), "scenes": written}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate, write_confusion_ppm
    from .rasters import UNDEFINED, read_labels
    from .scenegen import CLASSES

    preds = [read_labels(p) for p in args.pred]
    refs = [read_labels(r) for r in args.ref]
    if len(preds) != len(refs):
        raise UsageError("--pred and --ref need the same number of files")
    top = max(int(m.values[m.values != UNDEFINED].max(initial=0)) for m in preds + refs)
    classes = list(CLASSES) if top < len(CLASSES) else [str(i) for i in range(top + 1)]
    report = evaluate(preds, refs, erode_radius=args.erode, classes=classes,
                      metadata={"pred": [str(p) for p in args.pred], "ref": [str(r) for r in args.ref]})
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.confusion_ppm:
        write_confusion_ppm(report.confusion_matrix(), args.confusion_ppm)
    print(text)
    if args.table:
        print(report.to_text(), file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import AblationSpec, run_ablation
    from .scenegen import load_dataset, make_dataset
    from .training import TrainConfig

    spec_json = _read_json(args.config)
    train_cfg = dict(spec_json.pop("train", {}))
    data_cfg = dict(spec_json.pop("dataset", {}))
    if args.seeds is not None:
        spec_json["seeds"] = args.seeds
    if args.iterations is not None:
        train_cfg["iterations"] = args.iterations
    try:
        spec = AblationSpec(config=TrainConfig.from_dict(train_cfg), **spec_json)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad ablation config: {exc}") from None
    if args.data is not None:
        dataset = load_dataset(args.data)
    else:
        # degradation grids need object lists, so the dataset is regenerated in memory
        dataset = make_dataset(**data_cfg)
    report = run_ablation(spec, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(report.to_json(include_timing=False) + "\n")
    (out / "timing.json").write_text(json.dumps(report.timing, indent=2, sort_keys=True) + "\n")
    (out / "ablation.md").write_text(report.to_markdown())
    print(report.to_markdown())
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mapfuse", description="Map-aided semantic segmentation toolkit.")
    parser.add_argument("--verbose", action="store_true", help="log progress to standard error")
    parser.add_argument("--threads", type=str, default=None,
                        help="BLAS thread limit (fallback: MAPFUSE_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--scenes", type=int, default=None, help="total number of scenes (default 26)")
    g.add_argument("--test", type=int, default=None, help="scenes held out for testing")
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--p-drop", type=float, default=None)
    g.add_argument("--jitter", type=int, default=None)
    g.add_argument("--keep-fraction", type=float, default=None)
    g.add_argument("--config", type=Path, default=None, help="JSON file of generator parameters")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--model", required=True, choices=MODEL_CHOICES)
    t.add_argument("--encoding", default="binary", choices=("binary", "sdt"))
    t.add_argument("--config", type=Path, default=None, help="JSON training config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tiled prediction with a trained run")
    p.add_argument("--run", required=True, type=Path, help="directory written by train")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scene", nargs="*", default=None, help="scene ids (default: test split)")
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--stride", type=int, default=64)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score label maps against references")
    e.add_argument("--pred", required=True, nargs="+", type=Path)
    e.add_argument("--ref", required=True, nargs="+", type=Path)
    e.add_argument("--erode", type=float, default=3)
    e.add_argument("--out", type=Path, default=None, help="also write the JSON report here")
    e.add_argument("--confusion-ppm", type=Path, default=None)
    e.add_argument("--table", action="store_true", help="print a text table to standard error")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--config", type=Path, default=None, help="JSON ablation spec")
    a.add_argument("--data", type=Path, default=None)
    a.add_argument("--seeds", type=int, nargs="+", default=None)
    a.add_argument("--iterations", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    for sp in (g, t, p, e, a):
        sp.add_argument("--threads", type=str, default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        with _thread_limit(_threads(args)):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, NotADirectoryError, DimensionError, LabelError,
            CorruptionError, SamplingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
