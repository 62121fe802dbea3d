"""One test per acceptance criterion; each records a PASS/FAIL line for the terminal summary."""
import json
import math
import os
import time

import numpy as np
import pytest
import torch

from spinemorph.cli import run
from spinemorph.criteria import (
    boundary_loss, cmae, dice_coefficient, dice_loss, distance_metrics, edge_maps, mae, regression_metrics, smape,
)
from spinemorph.dataset import save_manifest
from spinemorph.evaluation import MetricReport, evaluate_regression, evaluate_segmentation
from spinemorph.landmarks import swap_left_right
from spinemorph.morphology import centroids, cobb_from_landmarks, dilate, rasterize_polyline, region_outline
from spinemorph.networks import RegNetConfig, SegNetConfig
from spinemorph.synthetic import random_landmarks, synthetic_dataset
from spinemorph.training import TrainConfig, train_regression, train_segmentation
from conftest import SMALL, TINY_REG, TINY_SEG, record_acceptance
from gradcheck import angle_point, grad_rel_error, map_point
from oracles import brute_edge, brute_max_filter, cmae_ref, inside_polygon, stacked_squares

REL = 1e-6


def check(key, passed, detail=""):
    record_acceptance(key, bool(passed), detail)
    assert passed, f"{key}: {detail}"


def close(a, b, rel=REL):
    return abs(a - b) <= rel * abs(b)


def test_1_formula_worked_examples():
    t0 = time.perf_counter()
    g, p = [[30.0, 20.0, 10.0]], [[33.0, 18.0, 12.0]]
    ed, md, cd = (float(v) for v in distance_metrics(g, p))
    got = {
        "smape": float(smape(g, p)), "mae": float(mae(g, p)), "ed": ed, "md": md, "cd": cd,
        "cmae": float(cmae([[0.0, 0.0, 0.0]], [[3.0, -2.0, 2.0]])),
        "dsc": float(dice_coefficient(np.array([[1, 1, 1, 1], [0, 0, 0, 0]]), np.array([[1, 1, 0, 0], [1, 1, 0, 0]]))),
    }
    # exact values of each worked example, derived independently
    exact = {"smape": 700 / 123, "mae": 7 / 3, "ed": math.sqrt(17), "md": 7.0, "cd": 3.0,
             "cmae": cmae_ref([[0.0, 0.0, 0.0]], [[3.0, -2.0, 2.0]]), "dsc": 0.5}
    # the figures as printed, to the precision they are printed at
    printed = {"smape": (5.6911, 1e-4), "mae": (2.3333, 1e-4), "cmae": (1.0004, 1e-4)}
    bad = [k for k in exact if not close(got[k], exact[k])]
    display = {k: abs(got[k] - v) <= 0.5 * unit for k, (v, unit) in printed.items()}
    elapsed = time.perf_counter() - t0
    detail = (f"cmae={got['cmae']:.7f} exact={exact['cmae']:.7f}; printed-precision match "
              f"{sorted(k for k, ok in display.items() if ok)}; {elapsed:.3f}s")
    check("1 formula oracle suite", not bad and elapsed < 1.0, detail + (f"; mismatched {bad}" if bad else ""))


def test_2_edge_extraction_equivalence():
    rng = np.random.default_rng(2024)
    mismatches, not_contained = 0, 0
    for _ in range(100):
        mask = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(np.float64)
        e, ext = edge_maps(torch.as_tensor(mask)[None])
        ref = brute_edge(mask)
        mismatches += not np.array_equal(e[0].numpy(), ref)
        mismatches += not np.array_equal(ext[0].numpy(), brute_max_filter(ref, 5))
        not_contained += bool((ext[0] < e[0]).any())
    check("2 edge-extraction equivalence", mismatches == 0 and not_contained == 0,
          f"100 masks, {mismatches} mismatches, {not_contained} containment failures")


def test_3_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    r = np.random.default_rng(3)
    for name, fn in (("dice_loss", dice_loss), ("boundary_loss", boundary_loss)):
        worst[name] = max(grad_rel_error(fn, *map_point(r), 1e-3) for _ in range(20))
    for name, fn in (("smape", lambda g, p: smape(g, p, percent=False)), ("mae", mae), ("cmae", cmae)):
        worst[name] = max(grad_rel_error(fn, *angle_point(r, name), 1e-4) for _ in range(20))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 60
    check("3 gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")


def test_4_metric_identities():
    rng = np.random.default_rng(4)
    failures = 0
    worst_ulp = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        g = rng.uniform(0, 179, (n, 3))
        p = rng.uniform(0, 179, (n, 3))
        m = regression_metrics(g, p)
        # MD and 3 * MAE are the same sum divided differently; allow float64 rounding only
        gap = abs(m["md"] - 3 * m["mae"]) / max(np.spacing(m["md"]), 1e-300)
        worst_ulp = max(worst_ulp, gap)
        d = np.abs(g - p)
        ed, md, cd = np.sqrt((d ** 2).sum(1)), d.sum(1), d.max(1)
        tol = 1e-12 * md
        failures += not ((cd <= ed + tol).all() and (ed <= md + tol).all() and (md <= math.sqrt(3) * ed + tol).all())
        s = m["smape"]
        c = rng.uniform(0.01, 100)
        failures += not close(float(smape(p, g)), s, 1e-9)
        failures += not close(float(smape(c * g, c * p)), s, 1e-9)
        failures += gap > 4
    check("4 metric identities", failures == 0, f"1000 batches, {failures} failures, MD vs 3*MAE within {worst_ulp:.0f} ulp")


def test_5_cobb_similarity_invariance():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        pts = random_landmarks(rng, (512, 256), tilt_noise_deg=3.0)
        moved = pts.copy()
        if rng.random() < 0.5:
            moved[:, 0] = -moved[:, 0]
            moved = swap_left_right(moved)
        a = math.radians(rng.uniform(-45, 45))
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        moved = rng.uniform(0.5, 2.0) * moved @ rot.T + rng.uniform(-1000, 1000, 2)
        diff = np.abs(cobb_from_landmarks(moved).as_array() - cobb_from_landmarks(pts).as_array()).max()
        worst = max(worst, float(diff))
    straight = cobb_from_landmarks(stacked_squares()).as_array()
    check("5 Cobb similarity invariance", worst <= 1e-6 and not straight.any(),
          f"200 sets, max change {worst:.1e} deg, straight spine {tuple(float(v) for v in straight)}")


def test_6_morphology_geometry():
    rng = np.random.default_rng(6)
    outside, non_monotone, not_identity = 0, 0, 0
    for _ in range(50):
        pts = random_landmarks(rng, SMALL)
        line = rasterize_polyline(centroids(pts), SMALL)
        rows, cols = np.nonzero(line)
        outside += int((~inside_polygon(region_outline(pts), np.stack([cols, rows], 1).astype(float))).sum())
        counts = [int(dilate(line, k).sum()) for k in (1, 3, 5, 7, 9)]
        non_monotone += counts != sorted(counts)
        not_identity += not np.array_equal(dilate(line, 1), line)
    check("6 morphology geometry", outside == non_monotone == not_identity == 0,
          f"50 sets, {outside} centerline pixels outside, {non_monotone} non-monotone, {not_identity} kernel-1 changes")


def test_7_overfit_smoke(seg_overfit, reg_overfit):
    seg_records, seg_result, seg_s = seg_overfit
    reg_records, reg_result, reg_s = reg_overfit
    dsc = evaluate_segmentation(seg_result.model, seg_records).metrics["dsc_region"] / 100
    err = evaluate_regression(reg_result.model, None, reg_records, maps="ground_truth").metrics["mae"]
    total = seg_s + reg_s
    steps = (len(seg_result.log) * seg_result.log[0]["steps"], len(reg_result.log) * reg_result.log[0]["steps"])
    check("7 overfit smoke tests", dsc >= 0.95 and err <= 1.0 and total < 2 * 3600 and steps == (200, 500),
          f"seg DSC {dsc:.4f} in {steps[0]} steps, reg MAE {err:.3f} deg in {steps[1]} steps, {total:.0f}s on CPU")


def test_8_determinism(tmp_path):
    records = synthetic_dataset(32, seed=8, shape=SMALL)
    seg_cfg = TrainConfig(stage="seg", epochs=3, base_lr=1e-3, seed=11, deterministic=True)
    reg_cfg = TrainConfig(stage="reg", epochs=3, base_lr=1e-3, seed=11, deterministic=True,
                          reg_input_maps="ground_truth")
    logs = []
    for run_dir in ("a", "b"):
        out = tmp_path / run_dir
        train_segmentation(records, seg_cfg, SegNetConfig(**TINY_SEG), out_dir=out)
        train_regression(records, reg_cfg, model_cfg=RegNetConfig(**TINY_REG), out_dir=out)
        logs.append([(out / f).read_bytes() for f in ("seg_log.jsonl", "reg_log.jsonl")])
    lines = [len(b.splitlines()) for b in logs[0]]
    check("8 determinism", logs[0] == logs[1] and lines == [3, 3],
          f"seg and reg JSON-lines logs identical: {logs[0] == logs[1]}")


def test_9_full_scale_reproduction():
    path = os.environ.get("SPINEMORPH_FULL_REPORT")
    if not path:
        record_acceptance("9 full-scale reproduction (not gating)", None,
                          "set SPINEMORPH_FULL_REPORT to a regression report.json from a full training run")
        pytest.skip("no full-scale report available")
    m = MetricReport.load(path).metrics
    ok = abs(m["smape"] - 7.28) <= 2.0 and abs(m["mae"] - 3.18) <= 1.0
    check("9 full-scale reproduction (not gating)", ok, f"SMAPE {m['smape']:.2f}%, MAE {m['mae']:.2f} deg")


TABLE_ROWS = [
    ("image", "smape,mae,cmae"),
    ("image,region", "smape,mae,cmae"),
    ("image,region,centerline", "smape,mae,cmae"),
    ("image,region,centerline,boundary", "smape,mae,cmae"),
    ("image,region,centerline,boundary", "smape"),
    ("image,region,centerline,boundary", "smape,mae"),
]


def test_10_ablation_harness(tmp_path):
    records = synthetic_dataset(4, seed=10, shape=(320, 160)) + synthetic_dataset(
        2, seed=11, shape=(320, 160), split="test", prefix="tst")
    manifest = str(save_manifest(records, tmp_path / "data"))
    size = ["--height", "256", "--width", "128"]
    quick = ["--epochs", "1", "--val-fraction", "0", "--deterministic"]
    seg = tmp_path / "seg"
    codes = [run(["train-seg", "--manifest", manifest, "--out", str(seg), "--base-width", "8", *size, *quick])]
    reports = []
    for k, (inputs, losses) in enumerate(TABLE_ROWS, start=1):
        out = tmp_path / f"row{k}"
        codes.append(run(["train-reg", "--manifest", manifest, "--out", str(out), "--seg-ckpt", str(seg / "seg_final.pt"),
                          "--inputs", inputs, "--losses", losses, "--width-mult", "0.25", "--depth-mult", "0.2",
                          *size, *quick]))
        codes.append(run(["evaluate", "--manifest", manifest, "--seg-ckpt", str(seg / "seg_final.pt"),
                          "--reg-ckpt", str(out / "reg_final.pt"), "--out", str(out / "report.json"), *size]))
        reports.append(json.loads((out / "report.json").read_text()))
    digests = {r["config_digest"] for r in reports}
    plumbed = all(r["config"]["reg"]["inputs"] == inputs.split(",") and r["config"]["reg_train"]["losses"] ==
                  losses.split(",") and r["config"]["reg"]["in_channels"] == len(inputs.split(","))
                  for r, (inputs, losses) in zip(reports, TABLE_ROWS))
    check("10 ablation harness", set(codes) == {0} and len(digests) == 6 and plumbed,
          f"exit codes {sorted(set(codes))}, {len(digests)} distinct digests, configs match rows: {plumbed}")
