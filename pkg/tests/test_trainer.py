import numpy as np
import pytest

from dfcn import autodiff as ad
from dfcn import ingest, metrics
from dfcn.network import NetworkConfig, build_dfcn, predict_labels
from dfcn.trainer import (
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    lr_schedule,
    optimizer_step,
    patches_per_epoch,
    predict_block,
    predict_blocks,
    train_loop,
)

TINY_MODEL = dict(level_sizes=(128, 32, 8, 2), stem_width=6, down_widths=(8, 8, 8), up_widths=(8, 8, 8),
                  head_width=8, k_dconv=1, nsample=8, interp_k=4)


def tiny_train(**kw):
    base = dict(patch_n=128, batch_size=2, val_fraction=0.0, epochs=1, patches_per_epoch=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _scalar_store(value):
    store = ad.ParamStore()
    store.add("x", np.array([value]))
    return store


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(2999, cfg) == 0.01
    assert lr_schedule(3000, cfg) == 0.005
    assert lr_schedule(9000, cfg) == 0.00125
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_adam_zero_gradient_and_constant_gradient():
    store = _scalar_store(1.0)
    st = OptimizerState()
    optimizer_step(store, st, 0.1)
    assert st.step == 1 and store["x"].data[0] == 1.0
    store = _scalar_store(0.0)
    st = OptimizerState()
    prev = 0.0
    for _ in range(50):
        store["x"].grad = np.array([2.5])
        optimizer_step(store, st, 0.01)
        step = store["x"].data[0] - prev
        prev = store["x"].data[0]
        assert step < 0
    assert abs(step + 0.01) < 1e-6


def test_adam_converges_on_quadratic():
    store = _scalar_store(-4.0)
    st = OptimizerState()
    for i in range(2000):
        x = store["x"]
        loss = ad.Tensor.from_op((x.data - 3.0) ** 2, (x,), lambda g, d=x.data: (g * 2 * (d - 3.0),))
        loss.backward(np.ones(1))
        optimizer_step(store, st, 0.05)
    assert abs(store["x"].data[0] - 3.0) < 1e-3


def test_nan_gradient_aborts_before_update():
    store = _scalar_store(1.0)
    store.add("y", np.zeros(2))
    store["y"].grad = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteGradientError, match="y"):
        optimizer_step(store, OptimizerState(), 0.1)
    assert store["x"].data[0] == 1.0


def test_gradient_clipping():
    store = _scalar_store(0.0)
    store["x"].grad = np.array([1e6])
    optimizer_step(store, OptimizerState(), 0.1, clip_grad=1.0)
    assert np.isfinite(store["x"].data[0])


def test_epoch_size():
    assert patches_per_epoch(10_000, TrainConfig(patch_n=2048)) == 5
    assert patches_per_epoch(10, TrainConfig(patches_per_epoch=7)) == 7


@pytest.fixture(scope="module")
def small_scene():
    return ingest.scene_from_spec({"layout": "urban", "n_points": 3000, "extent": [50, 50]}, 1)


def test_zero_lr_leaves_parameters(small_scene):
    model = build_dfcn(NetworkConfig(**TINY_MODEL))
    before = model.params.state()
    train_loop(model, small_scene, tiny_train(lr0=0.0))
    for name, value in before.items():
        assert np.array_equal(value, model.params[name].data)


def test_same_seed_same_curve_and_checkpoint(small_scene, tmp_path):
    runs = []
    for tag in "ab":
        model = build_dfcn(NetworkConfig(**TINY_MODEL))
        res = train_loop(model, small_scene, tiny_train(epochs=2), out_dir=tmp_path / tag,
                         log_path=tmp_path / f"{tag}.log")
        runs.append(res)
    assert runs[0].history == runs[1].history
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    assert (tmp_path / "a" / "init.ckpt").exists()
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert len(lines) == 4 and lines[0].split()[:2] == ["0", "0.01"]


def test_validation_writes_best_checkpoint(small_scene, tmp_path):
    model = build_dfcn(NetworkConfig(**TINY_MODEL))
    res = train_loop(model, small_scene, tiny_train(val_fraction=0.25, grid=20.0), out_dir=tmp_path)
    assert res.best_checkpoint is not None and res.best_checkpoint.exists()
    assert 0.0 <= res.best_val_f1 <= 1.0


def test_separable_two_class_scene_is_learned():
    spec = {"n_classes": 2, "noise": 0.02, "primitives": [
        {"type": "plane", "class": 0, "count": 600, "region": [0, 0, 20, 20], "intensity": [0.2, 0.02],
         "occlude": False},
        {"type": "box", "class": 1, "count": 600, "footprint": [4, 4, 16, 16], "height": 6, "occlude": False,
         "intensity": [0.8, 0.02]}]}
    cloud = ingest.synth_scene(spec, np.random.default_rng(0))
    model = build_dfcn(NetworkConfig(**{**TINY_MODEL, "n_classes": 2}))
    train_loop(model, cloud, tiny_train(epochs=50, patches_per_epoch=2, dropout_ratio=0.0))
    pred = predict_block(model, cloud)
    assert np.mean(pred == cloud.labels) > 0.95


def test_block_prediction_plumbing(small_scene):
    model = build_dfcn(NetworkConfig(**TINY_MODEL))
    whole = ingest.Block(np.zeros(2), np.zeros(2), np.arange(len(small_scene)))
    single = predict_blocks(model, [whole], small_scene)
    patch = ingest.prepare_block(small_scene)
    _, feats = ingest.network_inputs(patch.points)
    assert np.array_equal(single, predict_labels(model.forward(patch.points.xyz, feats)))
    blocks = ingest.tile_blocks(small_scene, 20.0)
    pred = predict_blocks(model, blocks, small_scene)
    assert np.all(pred < 9)
    cm = metrics.confusion(pred, small_scene.labels, 9)
    manual = [metrics.f1_from_pr(np.mean(small_scene.labels[pred == c] == c) if np.any(pred == c) else 0.0,
                                 np.mean(pred[small_scene.labels == c] == c) if np.any(small_scene.labels == c) else 0.0)
              for c in range(9)]
    np.testing.assert_allclose(metrics.precision_recall_f1(cm)[2], manual, atol=1e-12)
    with pytest.raises(ValueError):
        predict_blocks(model, [], small_scene)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dropout_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    cfg = TrainConfig(cuboid=[10, 10, 10])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
