import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from intermoco.encoder import Encoder, EncoderConfig
from intermoco.errors import ConfigError, DataError, UndefinedMetricError
from intermoco.evaluation import (
    Classifier, FineTuneConfig, auroc, bootstrap_ci, f1, fine_tune, macro_auroc, metric_fn, metric_report,
    stratified_subsample, task_kind, train_linear_head,
)
from intermoco.tensor import parameters_checksum


# -- metrics ----------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_exhaustive_small():
    rng = np.random.default_rng(0)
    for n in range(2, 9):
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                scores = rng.integers(0, 4, size=n).astype(float)
                assert auroc(scores, labels) == oracles.auroc_pairs(scores.tolist(), labels)


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_auroc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=30)
    y[:2] = [0, 1]
    s = rng.normal(size=30)
    assert auroc(s, y) == auroc(np.exp(3 * s) + 1, y)


def test_macro_auroc_is_mean():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, size=(40, 3))
    s = rng.random((40, 3))
    macro, per = macro_auroc(s, y)
    assert per == [auroc(s[:, j], y[:, j]) for j in range(3)]
    assert macro == float(np.mean(per))


def test_f1_examples():
    assert f1([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1([0, 0, 0], [1, 0, 1]) == 0.0
    assert f1([0, 0], [0, 0]) == 0.0
    # TP=2, FP=1, FN=1
    assert abs(f1([1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) - 2 / 3) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_f1_counting_oracle(pairs):
    p, y = zip(*pairs)
    assert abs(f1(p, y) - oracles.f1_count(p, y)) < 1e-15


def test_task_kind():
    assert task_kind(np.array([0, 1, 1])) == "binary"
    assert task_kind(np.eye(3)[[0, 1, 2, 1]]) == "multiclass"
    assert task_kind(np.array([[1, 1], [0, 0]])) == "multilabel"


def test_metric_fn_unknown():
    with pytest.raises(ConfigError):
        metric_fn("brier")


# -- bootstrap --------------------------------------------------------------

def _stream(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=(n, 1))
    s = np.clip(y * 0.3 + rng.random((n, 1)) * 0.7, 0, 1)
    return s, y


def test_bootstrap_constant_metric():
    s, y = _stream()
    r = bootstrap_ci(lambda a, b: 0.7, s, y, 100, seed=0)
    assert r.ci_low == r.ci_high == r.mu == 0.7 and r.sigma == 0.0


def test_bootstrap_half_width_formula():
    s, y = _stream()
    r = bootstrap_ci(metric_fn("auroc"), s, y, 500, seed=3)
    assert r.n == 500 and len(r.replicates) == 500
    np.testing.assert_allclose(r.mu, r.replicates.mean(), rtol=1e-14)
    np.testing.assert_allclose(r.sigma, r.replicates.std(ddof=1), rtol=1e-12)
    half = 1.96 * r.sigma / np.sqrt(500)
    assert r.ci_low == r.mu - half and r.ci_high == r.mu + half
    assert r.ci_low <= r.mu <= r.ci_high
    assert abs(1.96 * 0.1 / np.sqrt(1000) - 0.0062) < 1e-4


def test_bootstrap_deterministic_per_seed():
    s, y = _stream()
    a = bootstrap_ci(metric_fn("auroc"), s, y, 100, seed=1)
    b = bootstrap_ci(metric_fn("auroc"), s, y, 100, seed=1)
    c = bootstrap_ci(metric_fn("auroc"), s, y, 100, seed=2)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert not np.array_equal(a.replicates, c.replicates)


def test_bootstrap_replicates_are_prefix_stable():
    # spawned per-replicate streams: the first 100 replicates do not depend on N
    s, y = _stream()
    a = bootstrap_ci(metric_fn("auroc"), s, y, 100, seed=5)
    b = bootstrap_ci(metric_fn("auroc"), s, y, 300, seed=5)
    np.testing.assert_array_equal(a.replicates, b.replicates[:100])


def test_bootstrap_percentile():
    s, y = _stream()
    r = bootstrap_ci(metric_fn("auroc"), s, y, 400, seed=0, method="percentile")
    assert r.ci_low == float(np.percentile(r.replicates, 2.5))
    assert r.ci_high == float(np.percentile(r.replicates, 97.5))


def test_bootstrap_skips_single_class_replicates():
    y = np.zeros((8, 1), dtype=int)
    y[0] = 1
    s = np.linspace(0, 1, 8)[:, None]
    # P(no positive in a resample of 8) = (7/8)^8 ~ 0.34: far above 10%
    with pytest.raises(UndefinedMetricError):
        bootstrap_ci(metric_fn("auroc"), s, y, 200, seed=0)
    r = bootstrap_ci(metric_fn("auroc"), s, y, 200, seed=0, max_skip_fraction=1.0)
    assert r.skipped > 0 and r.n == 200 - r.skipped


def test_bootstrap_errors():
    s, y = _stream()
    with pytest.raises(ConfigError):
        bootstrap_ci(metric_fn("auroc"), s, y, 1)
    with pytest.raises(ConfigError):
        bootstrap_ci(metric_fn("auroc"), s, y, 10, method="bca")


def test_metric_report_json():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=(50, 2))
    logits = rng.normal(size=(50, 2)) + 2 * y
    rep = metric_report("auroc", logits, y, 50, seed=0, label_names=["a", "b"]).to_json()
    assert set(rep) >= {"metric", "point", "mu", "sigma", "n", "ci_low", "ci_high", "per_class"}
    assert list(rep["per_class"]) == ["a", "b"]
    assert abs(rep["point"] - np.mean(list(rep["per_class"].values()))) < 1e-12


# -- subsampling ------------------------------------------------------------

def test_subsample_identity_at_full_fraction():
    y = np.random.default_rng(0).integers(0, 2, size=37)
    np.testing.assert_array_equal(stratified_subsample(y, 1.0), np.arange(37))


def test_subsample_counting_example():
    y = np.zeros(1000, dtype=int)
    y[:300] = 1
    idx = stratified_subsample(y, 0.06, seed=4)
    assert len(idx) == 60 and y[idx].sum() == 18
    assert len(np.unique(idx)) == 60


def test_subsample_deterministic():
    y = np.random.default_rng(1).integers(0, 2, size=(300, 3))
    np.testing.assert_array_equal(stratified_subsample(y, 0.1, 3), stratified_subsample(y, 0.1, 3))
    assert not np.array_equal(stratified_subsample(y, 0.1, 3), stratified_subsample(y, 0.1, 4))


def test_subsample_too_small():
    with pytest.raises(ConfigError):
        stratified_subsample(np.zeros(50), 0.01)
    with pytest.raises(ConfigError):
        stratified_subsample(np.zeros(50), 0.0)
    with pytest.raises(DataError):
        stratified_subsample(np.zeros(0), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.01, 0.06, 0.1, 0.3]), st.integers(1, 4))
def test_subsample_per_label_counts(seed, frac, n_labels):
    rng = np.random.default_rng(seed)
    prevalence = rng.uniform(0.05, 0.5, size=n_labels)
    y = (rng.random((800, n_labels)) < prevalence).astype(int)
    idx = stratified_subsample(y, frac, seed)
    assert len(idx) == round(frac * 800)
    for j in range(n_labels):
        assert abs(int(y[idx, j].sum()) - round(frac * y[:, j].sum())) <= 1


def test_subsample_prevalence_close_for_rare_label():
    rng = np.random.default_rng(7)
    y = (rng.random(5000) < 0.1).astype(int)
    idx = stratified_subsample(y, 0.01, 0)
    full, sub = y.mean(), y[idx].mean()
    assert abs(sub - full) / full <= 0.10


def test_subsample_multiclass_exact_size():
    y = np.eye(3, dtype=int)[np.random.default_rng(2).choice(3, size=500, p=[0.6, 0.3, 0.1])]
    idx = stratified_subsample(y, 0.06, 0)
    assert len(idx) == 30
    for c in range(3):
        assert abs(int(y[idx, c].sum()) - round(0.06 * y[:, c].sum())) <= 1


# -- fine-tuning ------------------------------------------------------------

def _enc_cfg():
    return EncoderConfig(num_blocks=2, channels_per_block=(4, 8), in_channels=1, input_size=(8, 8),
                         embedding_dim=4, block_pool_sizes=((2, 2), (1, 1)))


def _toy_task(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=(n, 1))
    x = rng.random((n, 1, 8, 8)).astype(np.float32) * 0.5
    x[:, :, :4] += 0.4 * y[:, :, None, None]
    return x, y


def _trunk_sum(enc):
    return parameters_checksum(list(enc.parameters()) + [b for _, b in enc.named_buffers()])


def test_ll_freezes_trunk():
    enc = Encoder(_enc_cfg(), seed=0)
    res = fine_tune(enc, "LL", _toy_task(), _toy_task(seed=1), FineTuneConfig(epochs=3, batch_size=8))
    assert _trunk_sum(res.model.encoder) == _trunk_sum(enc)
    assert len(res.history) == 3


def test_e2e_updates_trunk_and_leaves_input_encoder():
    enc = Encoder(_enc_cfg(), seed=0)
    before = _trunk_sum(enc)
    res = fine_tune(enc, "E2E", _toy_task(), _toy_task(seed=1),
                    FineTuneConfig(epochs=2, batch_size=8, learning_rate=0.05))
    assert _trunk_sum(enc) == before
    if res.best_epoch > 0:
        assert _trunk_sum(res.model.encoder) != before


def test_e2e_zero_epochs_returns_initialization():
    enc = Encoder(_enc_cfg(), seed=0)
    res = fine_tune(enc, "E2E", _toy_task(), _toy_task(seed=1), FineTuneConfig(epochs=0, seed=3))
    init = Classifier(Encoder(_enc_cfg(), seed=0), 1, seed=3)
    for (na, a), (nb, b) in zip(res.model.named_parameters(), init.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(a.data, b.data)
    assert res.history == [] and res.best_epoch == 0


def test_random_init_baseline():
    enc = Encoder(_enc_cfg(), seed=0)
    res = fine_tune(enc, "E2E", _toy_task(), _toy_task(seed=1), FineTuneConfig(epochs=0, random_init=True))
    assert _trunk_sum(res.model.encoder) != _trunk_sum(enc)


def test_best_validation_epoch_kept():
    enc = Encoder(_enc_cfg(), seed=0)
    res = fine_tune(enc, "LL", _toy_task(), _toy_task(seed=1), FineTuneConfig(epochs=6, batch_size=8))
    vals = [h["val_auroc"] for h in res.history]
    assert res.best_epoch == int(np.argmax(vals)) + 1


def test_linear_head_standardization_folds_back():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 3)) * [1.0, 100.0, 0.01] + [5.0, -3.0, 0.0]
    y = (x[:, 1] > -3.0).astype(int)[:, None]
    res = train_linear_head(x, y, x, y, FineTuneConfig(epochs=5, batch_size=16, standardize=True))
    logits = x @ res.head.weight.data.T + res.head.bias.data
    assert auroc(logits[:, 0], y[:, 0]) > 0.95


def test_fine_tune_empty_rejected():
    enc = Encoder(_enc_cfg())
    x, y = _toy_task()
    with pytest.raises(DataError):
        fine_tune(enc, "LL", (x[:0], y[:0]), (x, y))
    with pytest.raises(ValueError):
        fine_tune(enc, "XX", (x, y), (x, y))


def test_fine_tune_config_validation():
    with pytest.raises(ConfigError):
        FineTuneConfig(epochs=-1)
    with pytest.raises(ConfigError):
        FineTuneConfig(metric="nope")
