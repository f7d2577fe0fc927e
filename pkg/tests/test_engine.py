import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermoco.augment import AugmentationPolicy, augment, color_jitter
from intermoco.encoder import EncoderConfig
from intermoco.engine import (
    SGD, Checkpoint, NegativeQueue, TrainConfig, enqueue_dequeue, log_fieldnames, read_logs, run_pretraining,
    train_step,
)
from intermoco.errors import ConfigError, DataError, NumericError
from intermoco.nn import Parameter
from intermoco.tensor import Tensor


def tiny_encoder(**kw):
    base = dict(num_blocks=2, channels_per_block=(4, 8), in_channels=3, input_size=(8, 8),
                embedding_dim=8, block_pool_sizes=((2, 2), (1, 1)), bt_dim=16)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_train(**kw):
    base = dict(embedding_dim=8, queue_size=16, batch_size=4, epochs=1, learning_rate=0.03, seed=0, block_mask=(1, 2))
    base.update(kw)
    return TrainConfig(**base)


def images(n=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, 8, 8)).astype(np.float32)


# -- queue ------------------------------------------------------------------

def test_queue_warmup():
    q = NegativeQueue(4, 2)
    enqueue_dequeue(q, np.arange(6.0).reshape(3, 2))
    assert q.size == 3
    np.testing.assert_array_equal(q.entries(), np.arange(6.0).reshape(3, 2))


def test_queue_fifo_eviction():
    q = NegativeQueue(4, 1)
    q.enqueue(np.array([[1.0], [2.0], [3.0], [4.0]]))
    q.enqueue(np.array([[5.0]]))
    np.testing.assert_array_equal(q.entries()[:, 0], [2, 3, 4, 5])


def test_queue_twice_full():
    rng = np.random.default_rng(0)
    q = NegativeQueue(5, 3, rng)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    q.enqueue(a)
    q.enqueue(b)
    np.testing.assert_allclose(q.entries(), b.astype(np.float32))


def test_queue_overflow_rejected():
    with pytest.raises(ConfigError):
        NegativeQueue(2, 2).enqueue(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        NegativeQueue(0, 2)


def test_queue_random_init_unit_rows():
    q = NegativeQueue(32, 7, np.random.default_rng(1))
    np.testing.assert_allclose(np.linalg.norm(q.buffer, axis=1), 1.0, atol=1e-6)
    assert q.size == 0


def test_queue_entries_are_snapshots():
    q = NegativeQueue(4, 2)
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    q.enqueue(t)
    t.data[:] = 7.0
    np.testing.assert_array_equal(q.entries(), np.ones((2, 2)))
    assert not q.as_tensor().requires_grad


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(1, 12), min_size=1, max_size=30))
def test_queue_matches_list_oracle(k, batches):
    q = NegativeQueue(k, 1)
    oracle, counter = [], 0
    for b in batches:
        b = min(b, k)
        keys = np.arange(counter, counter + b, dtype=np.float64)[:, None]
        counter += b
        q.enqueue(keys)
        oracle = (oracle + list(keys[:, 0]))[-k:]
        assert q.size == len(oracle) <= k
        np.testing.assert_array_equal(q.entries()[:, 0], oracle)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 16), st.integers(1, 40))
def test_queue_size_law(k, b, steps):
    b = min(b, k)
    q = NegativeQueue(k, 2)
    for t in range(1, steps + 1):
        q.enqueue(np.zeros((b, 2)))
        assert q.size == min(k, t * b)


# -- augmentation -----------------------------------------------------------

def test_identity_policy_returns_input():
    img = images(1)[0]
    out = augment(img, AugmentationPolicy.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_augment_deterministic_and_bounded():
    img = images(1)[0]
    pol = AugmentationPolicy(hflip=True)
    a = augment(img, pol, np.random.default_rng(9))
    b = augment(img, pol, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert a.dtype == img.dtype
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, augment(img, pol, np.random.default_rng(10)))


def test_grayscale_matches_luma_oracle():
    img = images(1, seed=2)[0].astype(np.float64)
    pol = AugmentationPolicy(jitter_p=0.0, rotation=(0.0, 0.0), blur_sigma=(0.0, 0.0), grayscale_p=1.0)
    out = augment(img, pol, np.random.default_rng(0))
    expected = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    for c in range(3):
        np.testing.assert_allclose(out[c], expected, atol=1e-12)


def test_hflip_always():
    img = images(1, seed=3)[0]
    pol = AugmentationPolicy(jitter_p=0.0, rotation=(0.0, 0.0), blur_sigma=(0.0, 0.0), grayscale_p=0.0,
                             hflip=True, hflip_p=1.0)
    np.testing.assert_array_equal(augment(img, pol, np.random.default_rng(0)), img[:, :, ::-1])


def test_one_pixel_image_passes_geometric_ops():
    img = np.full((3, 1, 1), 0.4)
    pol = AugmentationPolicy(jitter_p=0.0, grayscale_p=0.0, blur_sigma=(0.0, 0.0))
    np.testing.assert_array_equal(augment(img, pol, np.random.default_rng(0)), img)


def test_brightness_only_jitter():
    img = images(1, seed=4)[0].astype(np.float64) * 0.5
    out = color_jitter(img, 1.2, 1.0, 1.0, 0.0)
    np.testing.assert_allclose(out, img * 1.2, atol=1e-12)


def test_hue_full_turn_is_identity():
    img = images(1, seed=5)[0].astype(np.float64)
    np.testing.assert_allclose(color_jitter(img, 1.0, 1.0, 1.0, 1.0), img, atol=1e-10)


@pytest.mark.parametrize("kw", [dict(brightness=(1.4, 0.6)), dict(jitter_p=1.5), dict(blur_sigma=(-1.0, 1.0))])
def test_bad_policy(kw):
    with pytest.raises(ConfigError):
        AugmentationPolicy(**kw)


# -- optimizer --------------------------------------------------------------

def test_weight_decay_contraction_with_zero_gradients():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    opt = SGD([p], lr=0.3, momentum=0.0, weight_decay=1e-4)
    for t in range(1, 6):
        p.grad = np.zeros(3)
        opt.step()
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 3.0]) * (1 - 0.3 * 1e-4) ** t, rtol=1e-14)


def test_sgd_matches_momentum_oracle():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = Parameter(w.copy())
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    buf = np.zeros(4)
    for _ in range(10):
        g = rng.normal(size=4)
        p.grad = g.copy()
        opt.step()
        buf = 0.9 * buf + g + 0.01 * w
        w = w - 0.1 * buf
    np.testing.assert_allclose(p.data, w, rtol=1e-14)


def test_sgd_skips_params_without_grad():
    p = Parameter(np.ones(2))
    SGD([p], lr=1.0, weight_decay=0.5).step()
    np.testing.assert_array_equal(p.data, np.ones(2))


# -- train_step -------------------------------------------------------------

def _state(mode="moco", **kw):
    cfg = tiny_train(mode=mode, **kw)
    return cfg, Checkpoint.initialize(cfg, tiny_encoder())


def test_moco_step_reports_zero_intermediate():
    cfg, st_ = _state()
    r = train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    assert r.intermediate == [0.0, 0.0]
    assert r.total == r.contrastive
    assert np.isfinite(r.grad_norm) and r.grad_norm > 0
    assert st_.queue.size == 4


def test_identical_views_give_zero_mse():
    cfg, st_ = _state("moco+mse", augmentation=AugmentationPolicy.identity())
    st_.pair.query.eval()
    st_.pair.key.eval()
    r = train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    assert r.intermediate == [0.0, 0.0]


def test_mse_step_total_combines_terms():
    cfg, st_ = _state("moco+mse")
    r = train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    assert all(v > 0 for v in r.intermediate)
    assert abs(r.total - (r.contrastive + 0.25 * sum(r.intermediate))) < 1e-5


def test_bt_step_trains_query_projectors_only():
    cfg, st_ = _state("moco+bt", block_mask=(2,))
    assert st_.encoder_config.bt_projectors
    before = [p.data.copy() for p in st_.pair.query.projectors[1].parameters()]
    untouched = [p.data.copy() for p in st_.pair.query.projectors[0].parameters()]
    r = train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    assert r.intermediate[0] == 0.0 and r.intermediate[1] > 0
    assert any(not np.array_equal(b, p.data) for b, p in zip(before, st_.pair.query.projectors[1].parameters()))
    # the masked-out projector gets no gradient, so SGD leaves it alone
    for u, p in zip(untouched, st_.pair.query.projectors[0].parameters()):
        np.testing.assert_array_equal(u, p.data)
    assert all(p.grad is None for p in st_.pair.key.parameters())


def test_step_ema_drift_bound():
    cfg, st_ = _state()
    train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    k0 = [p.data.copy() for p in st_.pair.key.parameters()]
    train_step(st_.pair, st_.queue, st_.optimizer, images(4, seed=1), cfg, st_.rng)
    # the EMA uses the post-SGD query parameters
    gap = max(np.abs(q.data - k).max() for q, k in zip(st_.pair.query.parameters(), k0))
    drift = max(np.abs(k.data - k_old).max() for k, k_old in zip(st_.pair.key.parameters(), k0))
    assert drift <= (1 - cfg.encoder_momentum) * gap * (1 + 1e-5) + 1e-7


def test_step_replay_from_checkpoint(tmp_path):
    cfg, st_ = _state("moco+mse")
    train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    st_.save(tmp_path / "c.ckpt")
    reports = []
    for _ in range(2):
        s = Checkpoint.load(tmp_path / "c.ckpt")
        reports.append(train_step(s.pair, s.queue, s.optimizer, images(4, seed=7), cfg, s.rng))
    assert reports[0] == reports[1]
    live = train_step(st_.pair, st_.queue, st_.optimizer, images(4, seed=7), cfg, st_.rng)
    assert live == reports[0]


def test_non_finite_input_aborts_with_op_name():
    cfg, st_ = _state(augmentation=AugmentationPolicy.identity())
    bad = images(4)
    bad[1, 0, 2, 2] = np.nan
    with pytest.raises(NumericError, match="conv2d"):
        train_step(st_.pair, st_.queue, st_.optimizer, bad, cfg, st_.rng)


def test_batch_of_one_rejected():
    cfg, st_ = _state()
    with pytest.raises(DataError):
        train_step(st_.pair, st_.queue, st_.optimizer, images(1), cfg, st_.rng)


@pytest.mark.parametrize("kw", [
    dict(mode="simclr"), dict(learning_rate=0.0), dict(temperature=-1.0), dict(batch_size=1),
    dict(batch_size=32, queue_size=16), dict(encoder_momentum=1.2), dict(intermediate_scale=-0.1),
    dict(epochs=-1), dict(sgd_momentum=1.0),
])
def test_bad_train_config(kw):
    with pytest.raises(ConfigError):
        tiny_train(**kw)


def test_scale_defaults_by_mode():
    assert tiny_train().scale == 0.0
    assert tiny_train(mode="moco+mse").scale == 0.25
    assert tiny_train(mode="moco+bt").scale == 5e-5
    assert tiny_train(mode="moco+mse", intermediate_scale=0.0).scale == 0.0


def test_initialize_rejects_bad_mask_and_dim():
    with pytest.raises(ConfigError):
        Checkpoint.initialize(tiny_train(block_mask=(3,), mode="moco+mse"), tiny_encoder())
    with pytest.raises(ConfigError):
        Checkpoint.initialize(tiny_train(embedding_dim=4), tiny_encoder())


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg, st_ = _state("moco+bt")
    train_step(st_.pair, st_.queue, st_.optimizer, images(4), cfg, st_.rng)
    st_.epoch, st_.step = 3, 11
    p1 = st_.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(p1)
    p2 = loaded.save(tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.epoch == 3 and loaded.step == 11
    for a, b in zip(st_.arrays().values(), loaded.arrays().values()):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    assert loaded.rng.random() == st_.rng.random()
    assert loaded.encoder_config == st_.encoder_config
    assert loaded.train_config == st_.train_config


def test_checkpoint_contents(tmp_path):
    _, st_ = _state()
    names = zipfile.ZipFile(st_.save(tmp_path / "c.ckpt")).namelist()
    assert "manifest.json" in names
    assert "arrays/queue/buffer.tensor" in names
    assert any(n.startswith("arrays/key/") for n in names)
    assert any(n.startswith("arrays/optim/") for n in names)
    assert any("running_var" in n for n in names)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "missing.ckpt")
    _, st_ = _state()
    path = st_.save(tmp_path / "c.ckpt")
    data = zipfile.ZipFile(path).read("manifest.json").replace(b'"format_version": 1', b'"format_version": 99')
    with zipfile.ZipFile(tmp_path / "bad.ckpt", "w") as zf:
        zf.writestr("manifest.json", data)
    with pytest.raises(DataError, match="version"):
        Checkpoint.load(tmp_path / "bad.ckpt")


# -- run_pretraining --------------------------------------------------------

def test_zero_epochs_returns_initialized_state(tmp_path):
    cfg = tiny_train(epochs=0)
    res = run_pretraining(cfg, tiny_encoder(), images(8), images(4, 1), tmp_path)
    assert res.curves == [] and res.log_rows == []
    init = Checkpoint.initialize(cfg, tiny_encoder())
    for a, b in zip(res.checkpoint.arrays().values(), init.arrays().values()):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "loss_curves.csv").read_text().strip() == "epoch,train_contrastive,train_total,val_infonce"


def test_curves_one_row_per_epoch(tmp_path):
    cfg = tiny_train(epochs=3, mode="moco+mse")
    res = run_pretraining(cfg, tiny_encoder(), images(8), images(4, 1), tmp_path)
    assert [c["epoch"] for c in res.curves] == [1, 2, 3]
    assert all(np.isfinite(c["val_infonce"]) for c in res.curves)
    assert len(res.log_rows) == 3 * 2
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0].split(",")
    assert header == log_fieldnames(cfg, 2)
    assert header == ["epoch", "step", "contrastive_loss", "mse_block1", "mse_block2", "total", "grad_norm",
                      "wall_time"]
    assert res.best_epoch in (1, 2, 3)
    assert res.best_val == min(c["val_infonce"] for c in res.curves)
    best = Checkpoint.load(tmp_path / "best.ckpt")
    assert best.epoch == res.best_epoch


def test_bt_log_columns():
    assert log_fieldnames(tiny_train(mode="moco+bt"), 4)[3:7] == [f"bt_block{b}" for b in range(1, 5)]


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_train(epochs=2)
    full = run_pretraining(cfg, tiny_encoder(), images(8), images(4, 1), tmp_path / "full")
    first = run_pretraining(tiny_train(epochs=1), tiny_encoder(), images(8), images(4, 1), tmp_path / "part")
    assert first.checkpoint.epoch == 1
    rows, curves = read_logs(tmp_path / "part", 1)
    resumed = run_pretraining(cfg, tiny_encoder(), images(8), images(4, 1), tmp_path / "part",
                              resume=Checkpoint.load(tmp_path / "part" / "last.ckpt"),
                              prior_curves=curves, prior_rows=rows)
    a = Checkpoint.load(tmp_path / "full" / "last.ckpt").arrays()
    b = Checkpoint.load(tmp_path / "part" / "last.ckpt").arrays()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert [c["epoch"] for c in resumed.curves] == [1, 2]
    assert [c["train_contrastive"] for c in resumed.curves] == [c["train_contrastive"] for c in full.curves]


def test_too_few_images():
    with pytest.raises(DataError):
        run_pretraining(tiny_train(), tiny_encoder(), images(2))
