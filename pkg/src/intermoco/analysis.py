"""Feature-quality instruments: RBF-kernel CKA, layer-wise probing, binned KS distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .encoder import Encoder
from .errors import ConfigError, DimensionError, NumericError
from .evaluation import FineTuneConfig, MetricReport, encode_pooled, metric_report, train_linear_head
from .tensor import Tensor, no_grad


@dataclass
class CkaConfig:
    sigma_fraction: float = 0.8
    sigma_mode: str = "median"  # or "absolute": sigma_fraction is the bandwidth itself
    max_samples: int | None = None

    def __post_init__(self):
        if self.sigma_fraction <= 0:
            raise ConfigError(f"sigma_fraction must be > 0, got {self.sigma_fraction}")
        if self.sigma_mode not in ("median", "absolute"):
            raise ConfigError(f"sigma_mode must be 'median' or 'absolute', got {self.sigma_mode!r}")


@dataclass
class KsConfig:
    num_bins: int = 40

    def __post_init__(self):
        if self.num_bins < 2:
            raise ConfigError(f"num_bins must be >= 2, got {self.num_bins}")


def extract_block_features(encoder: Encoder, images: np.ndarray, block: int, batch_size: int = 128) -> np.ndarray:
    """n×C matrix of one block's tap, globally average pooled, eval mode."""
    nb = encoder.config.num_blocks
    if not 1 <= block <= nb:
        raise ConfigError(f"block {block} out of range; encoder has blocks 1..{nb}")
    return encode_pooled(encoder, images, block, batch_size).astype(np.float64)


def rbf_kernel(x: np.ndarray, sigma_fraction: float = 0.8, sigma_mode: str = "median") -> np.ndarray:
    sq = squareform(pdist(x, "sqeuclidean"))
    if sigma_mode == "median":
        med = np.median(np.sqrt(sq[np.triu_indices(len(x), k=1)]))
        if med <= 0:
            raise NumericError("RBF kernel bandwidth is zero: all rows are identical")
        sigma = sigma_fraction * med
    else:
        sigma = sigma_fraction
    return np.exp(-sq / (2.0 * sigma * sigma))


def _center(k: np.ndarray) -> np.ndarray:
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def cka_rbf(x, y, cfg: CkaConfig | None = None) -> float:
    """Biased-HSIC CKA between RBF kernels of ``x`` and ``y`` (rows are examples)."""
    cfg = cfg or CkaConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise DimensionError(f"cka_rbf needs n×p and n×q matrices, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DimensionError("cka_rbf needs at least 3 examples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NumericError("cka_rbf inputs contain non-finite values")
    kc = _center(rbf_kernel(x, cfg.sigma_fraction, cfg.sigma_mode))
    lc = _center(rbf_kernel(y, cfg.sigma_fraction, cfg.sigma_mode))
    # tr(KHLH) = <HKH, HLH>_F for symmetric K, L
    hsic_xy = float((kc * lc).sum())
    hsic_xx = float((kc * kc).sum())
    hsic_yy = float((lc * lc).sum())
    return hsic_xy / np.sqrt(hsic_xx * hsic_yy)


def ks_distance(logits_a, logits_b, cfg: KsConfig | None = None) -> float:
    """Max gap between the binned empirical CDFs of two logit samples.

    Both samples share ``num_bins`` equal-width bins spanning the union range.
    """
    cfg = cfg or KsConfig()
    a = np.asarray(logits_a, dtype=np.float64).ravel()
    b = np.asarray(logits_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DimensionError("ks_distance needs two non-empty samples")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, cfg.num_bins + 1)
    cdf_a = np.cumsum(bin_counts(a, edges)) / a.size
    cdf_b = np.cumsum(bin_counts(b, edges)) / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def bin_counts(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Counts per half-open bin [e_i, e_i+1); the last bin is closed."""
    nbins = len(edges) - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.clip(idx, 0, nbins - 1)
    return np.bincount(idx, minlength=nbins)


@dataclass
class ProbeReport:
    block: int
    report: MetricReport
    history: list[dict]

    def to_json(self) -> dict:
        return {"block": f"Block {self.block}", **self.report.to_json()}


def probe_features(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    cfg: FineTuneConfig,
    n_replicates: int = 1000,
    bootstrap_method: str = "paper",
    label_names=None,
    block: int = 0,
) -> ProbeReport:
    """Linear probe on precomputed feature matrices."""
    result = train_linear_head(train[0], train[1], val[0], val[1], cfg)
    test_y = np.asarray(test[1]).reshape(len(test[1]), -1)
    with no_grad():
        logits = result.head(Tensor(test[0], dtype=result.head.weight.dtype)).data
    report = metric_report(cfg.metric, logits, test_y, n_replicates, cfg.seed, bootstrap_method, label_names)
    return ProbeReport(block, report, result.history)


def layerwise_probe(
    encoder: Encoder,
    block: int,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    cfg: FineTuneConfig | None = None,
    n_replicates: int = 1000,
    bootstrap_method: str = "paper",
    label_names=None,
) -> ProbeReport:
    """Freeze ``encoder``, pool block ``block`` and fit a linear classifier on it."""
    cfg = cfg or FineTuneConfig()
    feats = [extract_block_features(encoder, split[0], block) for split in (train, val, test)]
    return probe_features(
        (feats[0], train[1]), (feats[1], val[1]), (feats[2], test[1]),
        cfg, n_replicates, bootstrap_method, label_names, block,
    )


def feature_reuse(pretrained: Encoder, finetuned: Encoder, images: np.ndarray, cfg: CkaConfig | None = None) -> list[float]:
    """Per-block CKA between the same blocks of two encoders on ``images``."""
    cfg = cfg or CkaConfig()
    if cfg.max_samples is not None:
        images = images[: cfg.max_samples]
    return [
        cka_rbf(extract_block_features(pretrained, images, b), extract_block_features(finetuned, images, b), cfg)
        for b in range(1, pretrained.config.num_blocks + 1)
    ]
