"""One test per acceptance criterion; each records a PASS/FAIL line for the summary.

Criterion 5 trains on the desk corpus with the reduced schedule in
configs/acceptance.ini and takes roughly a quarter of an hour.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from condshape import experiments as ex
from condshape.config import load_config
from condshape.geom import camera_at
from condshape.infer import optimize_latents
from condshape.losses import consistency_loss, front_loss, occlusion_pair
from condshape.metrics import chamfer, emd
from condshape.model import Generator, ModelConfig, ShapeAutoencoder
from condshape.render import render_depth, view_based_sample
from condshape.synthdata import generate_dataset

from conftest import random_camera, record
from gradcases import CASES, check
from oracles import chamfer_brute, emd_brute, zbuffer_brute

ROOT = Path(__file__).resolve().parents[1]
GRAD_TOL = 1e-4


def test_1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    cd_bad = 0
    for _ in range(1000):
        a = rng.normal(size=(int(rng.integers(1, 9)), 3))
        b = rng.normal(size=(int(rng.integers(1, 9)), 3))
        cd_bad += chamfer(a, b) != chamfer_brute(a, b)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 8))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        worst = max(worst, abs(emd(a, b).cost - emd_brute(a, b)))
    secs = time.perf_counter() - t0
    ok = cd_bad == 0 and worst <= 1e-9 and secs < 60
    record("1", ok, f"chamfer mismatches {cd_bad}/1000, max |emd - oracle| {worst:.1e}, {secs:.1f} s")
    assert ok


def test_2_gradient_suite():
    t0 = time.perf_counter()
    worst = {name: max(check(builder, seed) for seed in range(100)) for name, builder in CASES.items()}
    secs = time.perf_counter() - t0
    ok = all(v < GRAD_TOL for v in worst.values()) and secs < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("2", ok, f"max rel err {detail}, {secs:.1f} s")
    assert ok


def test_3_view_based_sampling():
    rng = np.random.default_rng(3)
    mismatches = rerender = 0
    for _ in range(100):
        cam = random_camera(rng)
        pts = rng.uniform(-0.5, 0.5, size=(int(rng.integers(1, 120)), 3))
        depth, who = zbuffer_brute(pts, cam)
        dm = render_depth(pts, cam)
        mismatches += not (np.array_equal(dm.contributor, who) and np.array_equal(dm.depth, depth))
        front = view_based_sample(pts, cam).front_indices
        rerender += not np.array_equal(render_depth(pts[front], cam).depth, dm.depth)
    ok = mismatches == 0 and rerender == 0
    record("3", ok, f"z-buffer mismatches {mismatches}/100, re-render mismatches {rerender}/100")
    assert ok


def test_4_occlusion_pair():
    cam = camera_at(30.0, 10.0, 2.5)
    pred, gt = occlusion_pair(cam)
    fl = float(front_loss(pred, gt, cam).data)
    cd = sum(chamfer(pred, gt))
    ok = fl == 0.0 and cd > 0
    record("4", ok, f"front_loss {fl!r}, full CD {cd:.4f}")
    assert ok


def test_7_consistency_fixed_point():
    cfg = ModelConfig()
    gen = Generator(cfg, ShapeAutoencoder(cfg, seed=0).decoder, seed=1)
    rng = np.random.default_rng(7)
    worst_loss, worst_steps = 0.0, 0
    for _ in range(20):
        n = int(rng.integers(2, 9))
        images = np.repeat(rng.uniform(size=(1, cfg.image_size ** 2)), n, axis=0)
        noise = np.repeat(rng.standard_normal((1, cfg.latent_dim)), n, axis=0)
        loss = float(consistency_loss(gen(images, noise)[0]).data)
        _, trace = optimize_latents(images, gen, noise)
        worst_loss, worst_steps = max(worst_loss, loss), max(worst_steps, trace.accepted_steps)
    ok = worst_loss == 0.0 and worst_steps == 0
    record("7", ok, f"max loss {worst_loss!r}, max accepted steps {worst_steps} over 20 cases")
    assert ok


# -- criterion 6 -------------------------------------------------------------------

def test_6_determinism(tmp_path):
    from condshape.cli import main
    smoke = str(ROOT / "configs" / "smoke.ini")
    names = ("model.ckpt", "autoencoder_log.csv", "stage1_log.csv", "stage2_log.csv", "metrics.csv")
    blobs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["train", "--config", smoke, "--seed", "11", "--out", str(out)]) == 0
        assert main(["eval", "--config", smoke, "--seed", "11", "--checkpoint", str(out / "model.ckpt"),
                     "--out", str(out)]) == 0
        blobs.append([(out / n).read_bytes() for n in names])
    same = [n for n, a, b in zip(names, *blobs) if a == b]
    ok = len(same) == len(names)
    record("6", ok, f"{len(same)}/{len(names)} artefacts bit-identical across two runs")
    assert ok


# -- criterion 5 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trends():
    t0 = time.perf_counter()
    cfg = load_config(ROOT / "configs" / "acceptance.ini")
    d = cfg["data"]
    ds = generate_dataset(d["shapes"], cfg.families(), cfg.ring(), symmetric=d["symmetric"],
                          sample_resolution=d["sample_resolution"], seed=0)
    res = ex.trend_suite(ds, cfg, seeds=(0, 1, 2), episodes=cfg["eval"]["episodes"], log=lambda m: None)
    res["seconds"] = time.perf_counter() - t0
    res["shapes"] = len(ds.records)
    return res


def test_5_runtime(trends):
    ok = trends["seconds"] < 30 * 60 and trends["shapes"] == 200
    record("5", ok, f"trend suite on {trends['shapes']} shapes took {trends['seconds'] / 60:.1f} min")
    assert ok


def test_5a_diversity_increases_with_beta(trends):
    div = trends["diversity"]
    vals = [div[b] for b in sorted(div)]
    ok = all(b > a for a, b in zip(vals, vals[1:]))
    record("5a", ok, "diversity " + ", ".join(f"beta {b:g}: {div[b]:.4f}" for b in sorted(div)))
    assert ok


def test_5b_inference_ordering(trends):
    rows, ok = [], True
    for seed, t in trends["inference"].items():
        r, h, o = t["no-heuristic"], t["heuristic"], t["heuristic+opt"]
        ok &= r > h > o
        rows.append(f"seed {seed}: {r:.2f} / {h:.2f} / {o:.2f}")
    record("5b", ok, "CD x100 random / heuristic / heuristic+opt; " + "; ".join(rows))
    assert ok


def test_5c_conditional_not_worse(trends):
    pairs = [(s, trends["conditional"][s], trends["deterministic"][s]) for s in trends["conditional"]]
    ok = all(c <= d for _, c, d in pairs)
    record("5c", ok, "CD x100 conditional / deterministic; " + "; ".join(f"seed {s}: {c:.2f} / {d:.2f}"
                                                                     for s, c, d in pairs))
    assert ok


def test_5d_views_sweep(trends):
    v = trends["views"]
    vals = [v[n] for n in sorted(v)]
    ok = all(b <= a for a, b in zip(vals, vals[1:]))
    record("5d", ok, "CD x100 " + ", ".join(f"n={n}: {v[n]:.2f}" for n in sorted(v)))
    assert ok


def test_5e_consistency_error_correlation(trends):
    r, n = trends["pearson_r"], trends["episodes"]
    ok = n >= 200 and r > 0
    record("5e", ok, f"pearson r {r:.4f} over {n} episodes")
    assert ok
