"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that is repeated in the pytest
terminal summary.  The training criteria are slow (tens of minutes on one
core); everything else finishes in seconds.
"""
import math
import statistics
import time

import numpy as np
import pytest

from conftest import record
from helpers import brute_counts, brute_erode, brute_signed_distance, gradcheck, zero_parameters
from mapfuse.experiments import AblationSpec, run_ablation
from mapfuse.inference import plan_tiling
from mapfuse.metrics import ConfusionMatrix, accumulate, f1_scores
from mapfuse.models import (Corrector, FuseNetMini, MiniSegNet, ResidualCorrectionPipeline,
                            fuse_average, fuse_residual)
from mapfuse.rasters import UNDEFINED, erode_labels, signed_distance_transform
from mapfuse.scenegen import BUILDING, CAR, make_dataset
from mapfuse.tensor import (RunningStats, Tensor, add, batchnorm2d, bilinear_resize, concat, conv2d,
                            masked_softmax_cross_entropy, maxpool2x2_with_indices, relu, scale,
                            unpool_with_indices)
from mapfuse.training import SceneArrays, TrainConfig, lr_at, sample_patch

SEEDS = [0, 1, 2]
K = 6
DENSE = dict(patch_size=64, batch_size=10, optimizer="adam", base_lr=0.01, iterations=300,
             widths=[8, 16, 32], eval_every=50, adam_anneal_at=0.67)


def verdict(n, ok, detail):
    record(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    return ok


# ------------------------------------------------------------- 1. gradients


def _spread(rng, shape, gap=0.01):
    """Values with pairwise gaps >= gap and no value near zero (kinks stay out of FD reach)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * gap * rng.choice([1, 2])
    return vals.reshape(shape)


def _grad_cases(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, (n, c, h, w))
    o, k = int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    labels = rng.integers(0, c + 1, (n, h, w))
    labels[rng.random((n, h, w)) < 0.2] = UNDEFINED
    labels[labels == c] = 0
    _, idx = maxpool2x2_with_indices(Tensor(_spread(rng, (n, c, h, w))))
    corr = Corrector(2 * c, K, widths=(3,), seed=int(rng.integers(100)))
    out_hw = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    return {
        "conv2d": (lambda t: conv2d(t[0], t[1], t[2], stride=stride, padding=k // 2),
                   [x, rng.uniform(-1, 1, (o, c, k, k)), rng.uniform(-1, 1, o)]),
        "relu": (lambda t: relu(t[0]), [_spread(rng, (n, c, h, w), 0.05)]),
        "add": (lambda t: add(t[0], t[1]), [x, rng.uniform(-1, 1, x.shape)]),
        "scale": (lambda t: scale(t[0], 0.37), [x]),
        "concat": (lambda t: concat([t[0], t[1]], axis=1), [x, rng.uniform(-1, 1, (n, 2, h, w))]),
        "maxpool2x2": (lambda t: maxpool2x2_with_indices(t[0])[0], [_spread(rng, (n, c, h, w))]),
        "unpool": (lambda t: unpool_with_indices(t[0], idx), [rng.uniform(-1, 1, (n, c, h // 2, w // 2))]),
        "batchnorm_train": (lambda t: batchnorm2d(t[0], t[1], t[2], RunningStats(c)),
                            [rng.uniform(-1, 1, (n + 1, c, h, w)), rng.uniform(0.5, 1.5, c), rng.uniform(-1, 1, c)]),
        "batchnorm_eval": (lambda t: batchnorm2d(t[0], t[1], t[2], RunningStats(c), training=False),
                           [x, rng.uniform(0.5, 1.5, c), rng.uniform(-1, 1, c)]),
        "masked_cross_entropy": (lambda t: masked_softmax_cross_entropy(t[0], labels), [x]),
        "bilinear_resize": (lambda t: bilinear_resize(t[0], out_hw), [x]),
        "fuse_average": (lambda t: fuse_average(t[0], t[1]), [rng.uniform(-1, 1, (n, K, h, w))] * 2),
        "fuse_residual": (lambda t: fuse_residual(t[0], t[1], t[2], corr),
                          [rng.uniform(-1, 1, (n, K, h, w)), x, rng.uniform(-1, 1, (n, c, h // 2, w // 2))]),
    }


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        for name, (fn, inputs) in _grad_cases(rng).items():
            err = gradcheck(fn, inputs, seed=i, h=1e-3)
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-2 and min(counts.values()) >= 20 and elapsed < 60
    verdict(1, ok, f"{len(worst)} ops x {min(counts.values())} instances, worst rel err "
                   f"{worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert ok, worst


# ----------------------------------------------------------- 2. degeneracy


def test_criterion_2_degeneracy():
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    layers = (rng.random((2, 4, 32, 32)) < 0.3).astype(np.float32)
    results = []
    for seed in range(3):
        fused = FuseNetMini(3, 4, K, widths=(8, 16, 32), seed=seed)
        zero_parameters(fused.ancillary)
        single = MiniSegNet(3, K, widths=(8, 16, 32))
        single.load_state_dict({k[5:]: v for k, v in fused.state_dict().items() if k.startswith("main.")})
        for mode in ("train", "eval"):
            fused.train(mode == "train")
            single.train(mode == "train")
            results.append(fused(Tensor(image), Tensor(layers)).data.tobytes()
                           == single(Tensor(image)).data.tobytes())
        rc = ResidualCorrectionPipeline(3, 4, K, widths=(8, 16, 32), seed=seed).eval()
        zero_parameters(rc.corrector)
        avg = fuse_average(rc.segnet(Tensor(image)), rc.osmnet(Tensor(layers))).data
        results.append(rc(Tensor(image), Tensor(layers)).data.tobytes() == avg.tobytes())
    ok = all(results)
    verdict(2, ok, f"{sum(results)}/{len(results)} bit-identical comparisons")
    assert ok


# -------------------------------------------------------------- 3. oracles


def test_criterion_3_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    sdt_err = 0.0
    for _ in range(200):
        h, w = rng.integers(1, 33, size=2)
        mask = rng.random((h, w)) < rng.uniform(0.0, 1.0)
        tau = float(rng.choice([2.0, 5.0, 32.0]))
        sdt_err = max(sdt_err, float(np.abs(signed_distance_transform(mask, tau)
                                            - brute_signed_distance(mask, tau)).max()))
    metric_ok = True
    for _ in range(100):
        h, w = rng.integers(1, 65, size=2)
        ref = rng.integers(0, K, (h, w)).astype(np.uint8)
        ref[rng.random((h, w)) < 0.1] = UNDEFINED
        pred = np.where(rng.random((h, w)) < 0.6, ref % K, rng.integers(0, K, (h, w))).astype(np.uint8)
        cm = accumulate(ConfusionMatrix(K), pred, ref)
        tp, cref, cpred, correct, total = brute_counts(pred, ref, K)
        expected_f1 = [None if c == 0 and p == 0 else 0.0 if t == 0 else 2 * t / (c + p)
                       for t, c, p in zip(tp, cref, cpred)]
        got = f1_scores(cm)
        same_f1 = all((a is None and b is None) or (a is not None and b is not None and abs(a - b) < 1e-15)
                      for a, b in zip(got, expected_f1))
        metric_ok &= same_f1 and cm.overall_accuracy() == (correct / total if total else None)
    erode_ok = True
    for _ in range(60):
        h, w = rng.integers(2, 33, size=2)
        cells = rng.integers(0, 4, ((h + 3) // 4, (w + 3) // 4)).astype(np.uint8)
        lab = np.kron(cells, np.ones((4, 4), np.uint8))[:h, :w]
        lab[rng.random((h, w)) < 0.05] = UNDEFINED
        radius = float(rng.choice([1, 2, 2.5, 3]))
        erode_ok &= np.array_equal(erode_labels(lab, radius).values, brute_erode(lab, radius))
    elapsed = time.perf_counter() - start
    ok = sdt_err < 1e-5 and metric_ok and erode_ok and elapsed < 120
    verdict(3, ok, f"SDT max err {sdt_err:.1e} over 200 masks; F1/OA exact over 100 pairs: {metric_ok}; "
                   f"erosion exact over 60 maps: {erode_ok}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------- 4. recipe


def test_criterion_4_recipe():
    cfg = TrainConfig()
    schedule = [lr_at(e, cfg) for e in (0, 1.9, 2, 3.9, 4)]
    schedule_ok = np.allclose(schedule, [0.01, 0.01, 0.001, 0.001, 0.0001], rtol=1e-12, atol=0)
    windows = len(plan_tiling((256, 256), 128, 64))
    labels = np.full((64, 64), UNDEFINED, np.uint8)
    labels[:4, :50] = 0  # 200 px, 4.9% of the patch
    scene = SceneArrays(np.zeros((3, 64, 64), np.float32), np.zeros((4, 64, 64), np.float32), labels)
    try:
        sample_patch(scene, 64, 0.05, np.random.default_rng(0))
        rejects = False
    except Exception as exc:  # noqa: BLE001 - any refusal counts, the type is checked below
        rejects = type(exc).__name__ == "SamplingError"
    logits = Tensor(np.random.default_rng(0).normal(size=(3, K, 8, 8)), requires_grad=True)
    loss = masked_softmax_cross_entropy(logits, np.full((3, 8, 8), UNDEFINED))
    loss.backward()
    zero_loss = float(loss.data) == 0.0 and not logits.grad.any()
    ok = schedule_ok and windows == 9 and rejects and zero_loss
    verdict(4, ok, f"lr schedule {schedule}; 256px tile -> {windows} windows; "
                   f"4.9% patch rejected: {rejects}; all-undefined loss 0: {zero_loss}")
    assert ok


# ------------------------------------------- 5 and 6. dense synthetic runs


@pytest.fixture(scope="module")
def dense_runs():
    start = time.perf_counter()
    dataset = make_dataset(n_train=20, n_test=6, size=256, seed=0, p_drop=0.15, jitter_px=2)
    cfg = TrainConfig(**DENSE)
    main = run_ablation(AblationSpec(models=["segnet_only", "fusenet"], encodings=["binary", "sdt"],
                                     seeds=SEEDS, config=cfg, window=128, stride=64), dataset)
    osm = run_ablation(AblationSpec(models=["osmnet_only"], encodings=["binary"], seeds=SEEDS,
                                    config=cfg, window=128, stride=64), dataset)
    return main, osm, time.perf_counter() - start


def test_criterion_5_dense_ablation(dense_runs):
    main, osm, elapsed = dense_runs
    seg = 100 * main.median_oa("segnet_only")
    fb = 100 * main.median_oa("fusenet", "binary")
    fs = 100 * main.median_oa("fusenet", "sdt")
    car = 100 * osm.median_f1("osmnet_only", CAR)
    bld = 100 * osm.median_f1("osmnet_only", BUILDING)
    a, b, c = fb >= seg + 2.0, car < 10 and bld > 60, abs(fb - fs) <= 1.5
    budget = elapsed < 45 * 60
    ok = a and b and c and budget
    verdict(5, ok, f"(a) OA fusenet {fb:.2f} vs segnet {seg:.2f} (gap {fb - seg:+.2f}, need >= 2.0): {a}; "
                   f"(b) osmnet car F1 {car:.1f} < 10, building F1 {bld:.1f} > 60: {b}; "
                   f"(c) |binary - sdt| = {abs(fb - fs):.2f} <= 1.5: {c}; "
                   f"{elapsed / 60:.1f} min for {len(main.cells) + len(osm.cells)} runs (limit 45): {budget}")
    assert ok


def _median_ratio(ratios):
    # an unreachable target counts as slower than any finite ratio
    return statistics.median([math.inf if r is None else r for r in ratios])


def test_criterion_6_convergence(dense_runs):
    main, _, _ = dense_runs
    rb = main.convergence_ratios("fusenet", "binary")
    rs = main.convergence_ratios("fusenet", "sdt")
    median_b, median_s = _median_ratio(rb), _median_ratio(rs)
    ok = len(rb) == len(SEEDS) and median_b < 1.0
    fmt = lambda rs_: "[" + ", ".join("unreachable" if r is None else f"{r:.3f}" for r in rs_) + "]"
    verdict(6, ok, f"seed-median convergence ratio (fusenet binary) {median_b:.3f} from {fmt(rb)}; "
                   f"sdt {median_s:.3f} from {fmt(rs)}")
    assert ok


# ------------------------------------------------------------ 7. sparse mode


def test_criterion_7_sparse_smoke():
    dataset = make_dataset(n_train=20, n_test=6, size=256, seed=0, keep_fraction=0.3)
    cfg = TrainConfig(**{**DENSE, "decoder_trunc": 2, "min_annotated_fraction": 0.05})
    report = run_ablation(AblationSpec(models=["segnet_only", "fusenet"], encodings=["binary"],
                                       seeds=SEEDS, config=cfg, window=128, stride=64), dataset)
    completed = all(c["status"] != "diverged" and c["report"] is not None for c in report.cells)
    oas = {m: [100 * c["report"]["overall_accuracy"] for c in report.select(m)] for m in ("segnet_only", "fusenet")}
    floor = 100 / K + 15
    above = all(v >= floor for vals in oas.values() for v in vals)
    med_f, med_s = statistics.median(oas["fusenet"]), statistics.median(oas["segnet_only"])
    ok = completed and above and med_f > med_s
    verdict(7, ok, f"runs completed: {completed}; min OA {min(min(v) for v in oas.values()):.2f} "
                   f">= {floor:.2f}: {above}; median OA fusenet {med_f:.2f} > segnet {med_s:.2f}: {med_f > med_s}")
    assert ok


# ---------------------------------------------------------- 8. determinism


def _pipeline(root, monkeypatch):
    from mapfuse.cli import main

    import json
    root.mkdir()
    monkeypatch.chdir(root)
    (root / "train.json").write_text(json.dumps({"patch_size": 32, "batch_size": 4, "optimizer": "adam",
                                                 "iterations": 20, "widths": [4, 8, 16], "eval_every": 10}))
    codes = [
        main(["gen", "--out", "data", "--scenes", "4", "--test", "1", "--size", "64", "--seed", "9"]),
        main(["train", "--data", "data", "--out", "run", "--model", "fusenet", "--encoding", "sdt",
              "--config", "train.json"]),
        main(["predict", "--run", "run", "--data", "data", "--out", "pred", "--window", "32", "--stride", "16"]),
        main(["eval", "--pred", "pred/0003_labels.mfr", "--ref", "data/scenes/0003/labels.mfr",
              "--out", "report.json"]),
    ]
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "timing.json")
    return codes, {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_8_determinism(tmp_path, monkeypatch):
    codes_a, files_a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, files_b = _pipeline(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    key_files = {"run/model.mfw", "pred/0003_labels.mfr", "pred/0003_scores.mfr", "report.json"}
    ok = codes_a == codes_b == [0, 0, 0, 0] and set(files_a) == set(files_b) and not differing \
        and key_files <= set(files_a)
    verdict(8, ok, f"{len(files_a)} files compared (checkpoint, label maps, reports; timing excluded), "
                   f"differing: {differing or 'none'}")
    assert ok
