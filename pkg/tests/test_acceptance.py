"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS / FAIL / REPORT line; the lines are printed as
they happen and again in the terminal summary.
"""
import math
import sys
import time

import numpy as np
import pytest

from dfcn import autodiff as ad
from dfcn import ingest, metrics
from dfcn.dconv import DConvSpec, dconv_forward, init_dconv_params
from dfcn.dknn import SectorQueryConfig, Space, directional_knn
from dfcn.hierarchy import LevelState, farthest_point_sampling, interpolation_weights, inverse_distance_interpolate
from dfcn.network import DFCN, NetworkConfig, build_dfcn, class_weights, weighted_loss
from dfcn.trainer import TrainConfig, predict_blocks, train_loop
import oracles
from gradcases import OPS

RESULTS = {}


def record(number, passed, detail):
    status = {True: "PASS", False: "FAIL", None: "REPORT"}[passed]
    line = f"criterion {number:>2}: {status:<6} {detail}"
    RESULTS[number] = line
    print(line, file=sys.__stdout__, flush=True)
    return passed


def summary_lines():
    return [RESULTS[k] for k in sorted(RESULTS)]


# ---------------------------------------------------------------- 1


def test_c01_directional_knn_oracle_equivalence():
    rng = np.random.default_rng(2024)
    mismatches, impl_time = 0, 0.0
    t0 = time.perf_counter()
    for i in range(1000):
        n = int(rng.integers(1, 513))
        extent = float(rng.choice([10.0, 30.0, 60.0]))
        pts = np.column_stack([rng.uniform(0, extent, (n, 2)), rng.uniform(0, 10, n)])
        if i % 4 == 0:
            pts = np.round(pts)  # lattice points force distance and angle ties
        cone = i % 2 == 1
        n_dirs = 8 if cone else int(rng.choice([4, 8]))
        k = int(rng.choice([1, 2, 4]))
        radius = float(rng.choice([2.0, 5.0, 10.0]))
        cfg = SectorQueryConfig(n_dirs, k, radius, Space.CONE_3D if cone else Space.PROJECTED_2D)
        s = time.perf_counter()
        got = directional_knn(pts, None, cfg)
        impl_time += time.perf_counter() - s
        want = oracles.knn_all_pairs(pts, n_dirs, k, radius, cone)
        mismatches += int(np.sum(np.any(got != want, axis=1)))
    total = time.perf_counter() - t0
    ok = mismatches == 0 and total < 30.0
    record(1, ok, f"1000 instances, {mismatches} mismatching rows, {total:.1f}s total "
                  f"({impl_time:.2f}s in the search itself)")
    assert ok


# ---------------------------------------------------------------- 2


def _off_kinks(store, rng):
    """Random biases: with the zero init, an all-zero relu output feeds the next layer an exact 0
    pre-activation, where relu has no derivative and central differences are meaningless."""
    for name, t in store.items():
        if name.endswith(".bias"):
            t.data[...] = rng.standard_normal(t.shape) * 0.5


def _dconv_case(rng):
    pts = np.column_stack([rng.uniform(0, 6, (24, 2)), rng.uniform(0, 2, 24)])
    spec = DConvSpec(int(rng.choice([4, 8])), int(rng.integers(1, 3)), 3.0, 3, 4)
    store = ad.ParamStore()
    init_dconv_params(store, "m", spec, rng)
    store["m.residual.weight"].data[...] = rng.standard_normal((4, 3))
    _off_kinks(store, rng)
    names = store.names()

    def fn(x, *ws):
        local = ad.ParamStore()
        for n, w in zip(names, ws):
            local._params[n] = w
        return dconv_forward(pts, x, spec, local, "m")

    return fn, [rng.standard_normal((24, 3))] + [store[n].data for n in names]


def _network_case(rng):
    model = build_dfcn(NetworkConfig(seed=int(rng.integers(1000))))
    for name, t in model.params.items():
        if name.endswith("residual.weight"):
            t.data[...] = rng.standard_normal(t.shape) * 0.1
    _off_kinks(model.params, rng)
    pts = np.column_stack([rng.uniform(0, 8, (64, 2)), rng.uniform(0, 3, 64)])
    feats = np.column_stack([rng.uniform(size=64), pts[:, 2]])
    labels = rng.integers(0, 9, 64)
    weights = class_weights(np.bincount(labels, minlength=9) + 1, 1.2)
    names = model.params.names()

    def fn(f, *ws):
        local = ad.ParamStore()
        for n, w in zip(names, ws):
            local._params[n] = w
        return weighted_loss(DFCN(model.config, local, model.dconv_specs).forward(pts, f), labels, weights)

    return fn, [feats] + [model.params[n].data for n in names]


def test_c02_gradient_verification():
    t0 = time.perf_counter()
    worst = {}
    cases = dict(OPS)
    cases["weighted_loss_eq7"] = (
        lambda r: [r.standard_normal((8, 9))],
        lambda r: (lambda z, y=r.integers(0, 10, 8), w=r.uniform(1, 4, 9): weighted_loss(z, y, w)),
    )
    for name, (make_inputs, make_fn) in cases.items():
        errs = []
        for seed in range(50):
            r = np.random.default_rng(seed)
            errs.append(ad.grad_check(make_fn(r), make_inputs(r), rng=r).max_rel_error)
        worst[name] = max(errs)
    errs = []
    for seed in range(50):
        r = np.random.default_rng(seed)
        fn, inputs = _dconv_case(r)
        errs.append(ad.grad_check(fn, inputs, rng=r, max_coords=6).max_rel_error)
    worst["dconv_module"] = max(errs)
    r = np.random.default_rng(7)
    fn, inputs = _network_case(r)
    worst["full_network_64pts"] = ad.grad_check(fn, inputs, rng=r, max_coords=4).max_rel_error
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 300
    record(2, ok, f"{len(worst)} checks, worst rel err {max(worst.values()):.2e} "
                  f"({max(worst, key=worst.get)}), {elapsed:.0f}s" + (f"; failing {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_grouped_conv_exactness():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m, n_dirs, k = int(rng.integers(1, 5)), int(rng.choice([1, 4, 8])), int(rng.choice([1, 2, 4]))
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.standard_normal((m, n_dirs * k, d_in))
        w, b = rng.standard_normal((d_out, k, d_in)), rng.standard_normal(d_out)
        worst = max(worst, float(np.abs(ad.conv_1xK(x, w, b).data - oracles.conv_1xK(x, w, b)).max()))
        y = rng.standard_normal((m, n_dirs, d_out))
        w2, b2 = rng.standard_normal((d_in, n_dirs, d_out)), rng.standard_normal(d_in)
        worst = max(worst, float(np.abs(ad.conv_1xNd(y, w2, b2).data - oracles.conv_1xNd(y, w2, b2)).max()))
    ok = worst <= 1e-12
    record(3, ok, f"100 random shapes, max abs deviation {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4

PUBLISHED_P = [0.718, 0.836, 0.927, 0.862, 0.621, 0.954, 0.637, 0.364, 0.767]
PUBLISHED_R = [0.690, 0.771, 0.902, 0.714, 0.264, 0.907, 0.575, 0.626, 0.822]
PUBLISHED_F1 = [0.704, 0.802, 0.914, 0.781, 0.370, 0.930, 0.605, 0.460, 0.794]


def test_c04_metric_reproduction():
    f1 = metrics.f1_from_pr(PUBLISHED_P, PUBLISHED_R)
    dev_a = float(np.abs(f1 - PUBLISHED_F1).max())
    dev_b = abs(metrics.average_f1(PUBLISHED_F1) - 0.707)
    rng = np.random.default_rng(4)
    dev_c = 0.0
    positive = True
    for _ in range(200):
        counts = rng.integers(1, 10**6, 9).astype(float)
        alpha = float(rng.uniform(1.05, 2.0))
        w = class_weights(counts, alpha)
        positive &= bool(np.all(w > 0))
        perm = rng.permutation(9)
        dev_c = max(dev_c, float(np.abs(class_weights(counts[perm], alpha) - w[perm]).max()))
        dev_c = max(dev_c, float(np.abs(class_weights(counts * rng.uniform(0.1, 1e3), alpha) - w).max()))
        eq = class_weights(np.full(9, counts[0]), alpha)
        dev_c = max(dev_c, float(np.ptp(eq)))
    ok = dev_a <= 0.001 and dev_b <= 0.0005 and dev_c <= 1e-12 and positive
    record(4, ok, f"(a) max F1 deviation {dev_a:.4f} (b) mean deviation {dev_b:.5f} "
                  f"(c) weight property deviation {dev_c:.1e}, positive={positive}")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_shape_contract():
    model = build_dfcn(NetworkConfig())
    rng = np.random.default_rng(5)
    trace = []
    pts = np.column_stack([rng.uniform(0, 30, (8192, 2)), rng.uniform(0, 20, 8192)])
    model.forward(pts, np.column_stack([rng.uniform(size=8192), pts[:, 2]]), trace)
    shapes = {}
    for n in (17, 1000, 20000):
        p = np.column_stack([rng.uniform(0, 30, (n, 2)), rng.uniform(0, 20, n)])
        shapes[n] = model.forward(p, np.column_stack([rng.uniform(size=n), p[:, 2]])).shape
    ok = trace == [8192, 1024, 256, 64, 256, 1024, 8192] and all(s == (n, 9) for n, s in shapes.items())
    record(5, ok, f"trace {trace}; logits {shapes}")
    assert ok


# ---------------------------------------------------------------- 6

DESK_MODEL = dict(level_sizes=(2048, 256, 64, 16), stem_width=16, down_widths=(32, 48, 64),
                  up_widths=(64, 48, 32), head_width=32, k_dconv=1, nsample=16, interp_k=8)
DESK_TRAIN = dict(batch_size=6, patch_n=2048, epochs=60, lr0=0.01, decay_every=150, val_fraction=0.0)
MINORITY = ("powerline", "car", "fence_hedge", "facade", "shrub")


def desk_scene(layout_seed, sample_seed, n_points=50_000):
    layout = ingest.UrbanLayout(n_points=n_points)
    cfg = ingest.urban_scene_config(layout, np.random.default_rng(layout_seed))
    return ingest.synth_scene(cfg, np.random.default_rng(sample_seed))


def _fit_and_test(train, test, alpha):
    model = build_dfcn(NetworkConfig(**DESK_MODEL, alpha=alpha))
    train_loop(model, train, TrainConfig(**DESK_TRAIN, alpha=alpha))
    pred = predict_blocks(model, ingest.tile_blocks(test, 30.0, 0.5), test)
    return metrics.confusion(pred, test.labels, 9)


@pytest.mark.slow
def test_c06_learning_sanity():
    t0 = time.perf_counter()
    train, test = desk_scene(10, 11), desk_scene(20, 21)
    cm = _fit_and_test(train, test, 1.2)
    oa = metrics.overall_accuracy(cm)
    recall = metrics.precision_recall_f1(cm)[1]
    avg_f1 = metrics.average_f1(metrics.precision_recall_f1(cm)[2])
    cm_off = _fit_and_test(train, test, None)
    recall_off = metrics.precision_recall_f1(cm_off)[1]
    elapsed = time.perf_counter() - t0
    drops = {c: recall[ingest.CLASS_NAMES.index(c)] - recall_off[ingest.CLASS_NAMES.index(c)] for c in MINORITY}
    best = max(drops, key=drops.get)
    ok = oa >= 0.90 and avg_f1 >= 0.80 and elapsed <= 900 and drops[best] >= 0.05
    record(6, ok, f"OA {oa:.3f}, average F1 {avg_f1:.3f}, {elapsed:.0f}s for both runs; "
                  f"largest minority recall drop without weights: {best} {drops[best] * 100:.1f} points "
                  f"({len(train)} training points)")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_determinism(tmp_path):
    scene = ingest.scene_from_spec({"layout": "urban", "n_points": 4000, "extent": [50, 50]}, 3)
    model_cfg = NetworkConfig(level_sizes=(128, 32, 8, 2), stem_width=6, down_widths=(8, 8, 8),
                              up_widths=(8, 8, 8), head_width=8, k_dconv=1, nsample=8, interp_k=4)
    train_cfg = TrainConfig(patch_n=128, batch_size=2, epochs=1000, val_fraction=0.0, seed=11)
    blobs = []
    for tag in "ab":
        res = train_loop(build_dfcn(model_cfg), scene, train_cfg, out_dir=tmp_path / tag, max_steps=200)
        assert res.steps == 200
        blobs.append((tmp_path / tag / "last.ckpt").read_bytes())
    ok = blobs[0] == blobs[1]
    record(7, ok, f"two 200-step runs, checkpoints {'bitwise identical' if ok else 'differ'} "
                  f"({len(blobs[0])} bytes)")
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_fps_and_interpolation():
    rng = np.random.default_rng(8)
    fps_bad = 0
    for i in range(100):
        n = int(rng.integers(1, 65))
        pts = rng.uniform(0, 10, (n, 3))
        if i % 3 == 0:
            pts = np.round(pts)
        m = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        fps_bad += farthest_point_sampling(pts, m, start).tolist() != oracles.fps(pts, m, start)
    worst_sum = 0.0
    copies_exact = True
    for _ in range(100):
        src = rng.uniform(0, 10, (int(rng.integers(1, 80)), 3))
        dst = np.vstack([rng.uniform(0, 10, (30, 3)), src[: min(5, len(src))]])
        _, w = interpolation_weights(src, dst, k=32)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1.0).max()))
        feats = rng.standard_normal((len(src), 4))
        out = inverse_distance_interpolate(LevelState(src, feats, 1), dst, k=32).data
        copies_exact &= bool(np.array_equal(out[30:], feats[: min(5, len(src))]))
    ok = fps_bad == 0 and worst_sum <= 1e-12 and copies_exact
    record(8, ok, f"FPS mismatches {fps_bad}/100; max |sum w - 1| {worst_sum:.1e}; "
                  f"coincident copies exact={copies_exact}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_full_scale_not_reproducible():
    record(9, None, "non-gating: the benchmark aggregates (OA 0.822, average F1 0.707) need the licensed "
                    "dataset and GPU-scale training; not attempted at desk scale")


# ---------------------------------------------------------------- 10

ABLATION_MODEL = dict(level_sizes=(1024, 128, 32, 8), stem_width=12, down_widths=(24, 32, 48),
                      up_widths=(48, 32, 24), head_width=24, k_dconv=1, nsample=16, interp_k=8)
ABLATION_TRAIN = dict(batch_size=6, patch_n=1024, epochs=20, lr0=0.01, decay_every=100, val_fraction=0.0)
VARIANTS = {
    "none": dict(use_dconv=False),
    "cone3d-8": dict(space="cone3d", n_dirs=8),
    "sector2d-4": dict(space="projected2d", n_dirs=4),
    "sector2d-8": dict(space="projected2d", n_dirs=8),
}


@pytest.mark.slow
def test_c10_ablation_ordering():
    wins = 0
    rows = []
    t0 = time.perf_counter()
    for seed in range(5):
        train = desk_scene(100 + seed, 200 + seed, 15_000)
        test = desk_scene(300 + seed, 400 + seed, 15_000)
        scores = {}
        for name, overrides in VARIANTS.items():
            model = build_dfcn(NetworkConfig(**ABLATION_MODEL, **overrides, seed=seed))
            train_loop(model, train, TrainConfig(**ABLATION_TRAIN, seed=seed))
            cm = metrics.confusion(predict_blocks(model, ingest.tile_blocks(test, 30.0, 0.5), test), test.labels, 9)
            scores[name] = metrics.average_f1(metrics.precision_recall_f1(cm)[2])
        rows.append(scores)
        wins += all(scores["sector2d-8"] >= v for v in scores.values())
    means = {k: float(np.mean([r[k] for r in rows])) for k in VARIANTS}
    record(10, None, f"non-gating: sector2d-8 best in {wins}/5 seeds (target >= 3); mean average F1 "
                     + ", ".join(f"{k} {v:.3f}" for k, v in means.items())
                     + f"; {time.perf_counter() - t0:.0f}s")
