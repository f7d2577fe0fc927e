"""Momentum-contrast pretraining with optional intermediate-feature losses."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import objectives as obj
from . import tensor as T
from .augment import AugmentationPolicy, augment
from .encoder import Encoder, EncoderConfig, MomentumPair, bt_project
from .errors import ConfigError, DataError, NumericError
from .nn import Parameter
from .tensor import Tensor, no_grad, read_tensor, write_tensor

log = logging.getLogger(__name__)

MODES = ("moco", "moco+mse", "moco+bt")
DEFAULT_SCALES = {"moco": 0.0, "moco+mse": 0.25, "moco+bt": 5e-5}
CHECKPOINT_VERSION = 1


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings backed by a ring buffer.

    The buffer starts filled with random unit vectors so the contrastive loss is
    defined from the first step; ``size`` counts only keys actually enqueued.
    """

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator | None = None, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ConfigError(f"queue capacity and dim must be positive, got K={capacity}, d={dim}")
        self.capacity = capacity
        self.dim = dim
        if rng is None:
            self.buffer = np.zeros((capacity, dim), dtype=dtype)
        else:
            init = rng.standard_normal((capacity, dim))
            self.buffer = (init / np.linalg.norm(init, axis=1, keepdims=True)).astype(dtype)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def enqueue(self, keys) -> None:
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ConfigError(f"keys must be B×{self.dim}, got {keys.shape}")
        b = keys.shape[0]
        if b > self.capacity:
            raise ConfigError(f"cannot enqueue {b} keys into a queue of capacity {self.capacity}")
        end = self.ptr + b
        if end <= self.capacity:
            self.buffer[self.ptr:end] = keys
        else:
            first = self.capacity - self.ptr
            self.buffer[self.ptr:] = keys[:first]
            self.buffer[: b - first] = keys[first:]
        self.ptr = end % self.capacity
        self.size = min(self.capacity, self.size + b)

    def entries(self) -> np.ndarray:
        """Enqueued keys, oldest first."""
        if self.size < self.capacity:
            return self.buffer[self.ptr - self.size:self.ptr].copy()
        return np.roll(self.buffer, -self.ptr, axis=0)

    def as_tensor(self) -> Tensor:
        return Tensor(self.buffer.copy())


def enqueue_dequeue(queue: NegativeQueue, keys) -> NegativeQueue:
    queue.enqueue(keys)
    return queue


@dataclass
class TrainConfig:
    learning_rate: float = 0.3
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    encoder_momentum: float = 0.99
    temperature: float = 0.07
    embedding_dim: int = 128
    queue_size: int = 256
    batch_size: int = 32
    epochs: int = 20
    mode: str = "moco"
    block_mask: tuple[int, ...] = (1, 2, 3, 4)
    intermediate_scale: float | None = None
    bt_lambda: float = 5e-3
    normalize_embeddings: bool = True
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationPolicy(**self.augmentation)
        self.block_mask = tuple(int(b) for b in self.block_mask)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("learning_rate", "temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and sgd_momentum in [0, 1)")
        if not 0 <= self.encoder_momentum <= 1:
            raise ConfigError(f"encoder_momentum must be in [0, 1], got {self.encoder_momentum}")
        if self.queue_size < 1 or self.embedding_dim < 1:
            raise ConfigError("queue_size and embedding_dim must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.batch_size > self.queue_size:
            raise ConfigError(f"batch_size {self.batch_size} exceeds queue_size {self.queue_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.intermediate_scale is not None and self.intermediate_scale < 0:
            raise ConfigError("intermediate_scale must be >= 0")
        if self.bt_lambda < 0:
            raise ConfigError("bt_lambda must be >= 0")

    @property
    def scale(self) -> float:
        if self.intermediate_scale is not None:
            return float(self.intermediate_scale)
        return DEFAULT_SCALES[self.mode]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_mask"] = list(self.block_mask)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: list[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.momentum * self.buffers[i] + g
            self.buffers[i] = buf
            p.data = p.data - self.lr * buf


@dataclass
class StepReport:
    contrastive: float
    intermediate: list[float]
    total: float
    grad_norm: float


def _embed(encoder: Encoder, images: Tensor, normalize: bool):
    emb, taps = encoder.forward_with_taps(images)
    return (T.l2_normalize(emb) if normalize else emb), taps


def intermediate_terms(pair: MomentumPair, q_taps, k_taps, cfg: TrainConfig) -> list[Tensor | None]:
    """Per-block intermediate losses for the configured mode (``None`` outside the mask)."""
    n = len(q_taps)
    if cfg.mode == "moco":
        return [None] * n
    mask = obj.validate_block_mask(cfg.block_mask, n)
    if cfg.mode == "moco+mse":
        per_block, _ = obj.intermediate_mse_loss(q_taps, k_taps, pair.query.config.block_pool_sizes, mask)
        return per_block
    if not pair.query.projectors:
        raise ConfigError("mode moco+bt requires an encoder built with bt_projectors=True")
    per_block = [None] * n
    for b in mask:
        za = bt_project(q_taps[b - 1], pair.query.projectors[b - 1])
        with no_grad():
            zb = bt_project(k_taps[b - 1], pair.key.projectors[b - 1])
        per_block[b - 1] = obj.barlow_twins_loss(obj.cross_correlation(za, zb), cfg.bt_lambda)
    return per_block


def make_views(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    v1, v2 = [], []
    for img in images:
        v1.append(augment(img, policy, rng))
        v2.append(augment(img, policy, rng))
    return np.stack(v1), np.stack(v2)


def train_step(
    pair: MomentumPair,
    queue: NegativeQueue,
    optimizer: SGD,
    images: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepReport:
    """One optimization step: two views, combined loss, SGD on the query, EMA, enqueue."""
    if len(images) < 2:
        raise DataError("train_step needs a batch of at least 2 images")
    dtype = pair.query.config.dtype
    x1, x2 = make_views(images, cfg.augmentation, rng)
    x1, x2 = Tensor(x1, dtype=dtype), Tensor(x2, dtype=dtype)

    try:
        q, q_taps = _embed(pair.query, x1, cfg.normalize_embeddings)
        with no_grad():
            k, k_taps = _embed(pair.key, x2, cfg.normalize_embeddings)
        contrastive = obj.info_nce_loss(q, k, queue.as_tensor(), cfg.temperature)
        per_block = intermediate_terms(pair, q_taps, k_taps, cfg)
        if cfg.mode == "moco":
            total = contrastive
        else:
            total = obj.combined_loss(contrastive, per_block, cfg.scale, cfg.block_mask)
        optimizer.zero_grad()
        total.backward()
    except NumericError as exc:
        raise NumericError(f"non-finite value during train_step: {exc}") from exc

    grad_sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in optimizer.params if p.grad is not None)
    optimizer.step()
    pair.ema_update()
    queue.enqueue(k)
    return StepReport(
        contrastive=contrastive.item(),
        intermediate=[0.0 if t is None else t.item() for t in per_block],
        total=total.item(),
        grad_norm=float(np.sqrt(grad_sq)),
    )


def validation_infonce(pair: MomentumPair, queue: NegativeQueue, images: np.ndarray, cfg: TrainConfig,
                       seed: int, batch_size: int | None = None) -> float:
    """Mean eval-mode InfoNCE over ``images`` with views from a fixed seed; queue untouched."""
    if len(images) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    bs = batch_size or cfg.batch_size
    was_training = pair.query.training, pair.key.training
    pair.query.eval()
    pair.key.eval()
    total, count = 0.0, 0
    dtype = pair.query.config.dtype
    try:
        with no_grad():
            for start in range(0, len(images), bs):
                batch = images[start:start + bs]
                x1, x2 = make_views(batch, cfg.augmentation, rng)
                q, _ = _embed(pair.query, Tensor(x1, dtype=dtype), cfg.normalize_embeddings)
                k, _ = _embed(pair.key, Tensor(x2, dtype=dtype), cfg.normalize_embeddings)
                loss = obj.info_nce_loss(q, k, queue.as_tensor(), cfg.temperature)
                total += loss.item() * len(batch)
                count += len(batch)
    finally:
        pair.query.train(was_training[0])
        pair.key.train(was_training[1])
    return total / count


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    train_config: TrainConfig
    pair: MomentumPair
    optimizer: SGD
    queue: NegativeQueue
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @classmethod
    def initialize(cls, train_cfg: TrainConfig, encoder_cfg: EncoderConfig) -> Checkpoint:
        if encoder_cfg.embedding_dim != train_cfg.embedding_dim:
            raise ConfigError(
                f"embedding_dim mismatch: encoder {encoder_cfg.embedding_dim} vs train {train_cfg.embedding_dim}"
            )
        if train_cfg.mode == "moco+bt" and not encoder_cfg.bt_projectors:
            encoder_cfg = EncoderConfig(**{**encoder_cfg.to_dict(), "bt_projectors": True})
        obj.validate_block_mask(train_cfg.block_mask, encoder_cfg.num_blocks)
        seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
        query = Encoder(encoder_cfg, seed=int(seeds[0].generate_state(1)[0]))
        pair = MomentumPair(query, momentum=train_cfg.encoder_momentum)
        queue = NegativeQueue(train_cfg.queue_size, encoder_cfg.embedding_dim,
                              np.random.default_rng(seeds[1]), dtype=np.dtype(encoder_cfg.dtype))
        opt = SGD(query.parameters(), train_cfg.learning_rate, train_cfg.sgd_momentum, train_cfg.weight_decay)
        return cls(encoder_cfg, train_cfg, pair, opt, queue, np.random.default_rng(seeds[2]))

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "encoder_config": self.encoder_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "queue": {"capacity": self.queue.capacity, "dim": self.queue.dim,
                      "ptr": self.queue.ptr, "size": self.queue.size},
            "rng_state": self.rng.bit_generator.state,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"query/{k}": v for k, v in self.pair.query.state_dict().items()}
        out.update({f"key/{k}": v for k, v in self.pair.key.state_dict().items()})
        names = [n for n, _ in self.pair.query.named_parameters()]
        out.update({f"optim/{n}": b for n, b in zip(names, self.optimizer.buffers)})
        out["queue/buffer"] = self.queue.buffer
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            _writestr(zf, "manifest.json", json.dumps(self.manifest(), sort_keys=True, indent=1).encode())
            for name, arr in sorted(self.arrays().items()):
                buf = io.BytesIO()
                write_tensor(buf, arr)
                _writestr(zf, f"arrays/{name}.tensor", buf.getvalue())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
            arrays = {
                name[len("arrays/"):-len(".tensor")]: read_tensor(io.BytesIO(zf.read(name)))
                for name in zf.namelist() if name.startswith("arrays/")
            }
        enc_cfg = EncoderConfig(**manifest["encoder_config"])
        train_cfg = TrainConfig.from_dict(manifest["train_config"])
        query = Encoder(enc_cfg)
        query.load_state_dict(_strip(arrays, "query/"))
        key = Encoder(enc_cfg)
        key.load_state_dict(_strip(arrays, "key/"))
        pair = MomentumPair(query, key, momentum=train_cfg.encoder_momentum)
        opt = SGD(query.parameters(), train_cfg.learning_rate, train_cfg.sgd_momentum, train_cfg.weight_decay)
        optim = _strip(arrays, "optim/")
        opt.buffers = [optim[n] for n, _ in query.named_parameters()]
        q = manifest["queue"]
        queue = NegativeQueue(q["capacity"], q["dim"], dtype=arrays["queue/buffer"].dtype)
        queue.buffer = arrays["queue/buffer"]
        queue.ptr, queue.size = q["ptr"], q["size"]
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng_state"]
        return cls(enc_cfg, train_cfg, pair, opt, queue, rng, manifest["epoch"], manifest["step"])


def _writestr(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_encoder(path) -> Encoder:
    """Query encoder of a pretraining checkpoint, in eval mode."""
    return Checkpoint.load(path).pair.query.eval()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    curves: list[dict]
    log_rows: list[dict]
    best_epoch: int | None = None
    best_val: float | None = None


def log_fieldnames(cfg: TrainConfig, num_blocks: int) -> list[str]:
    prefix = "bt" if cfg.mode == "moco+bt" else "mse"
    return (["epoch", "step", "contrastive_loss"] + [f"{prefix}_block{b}" for b in range(1, num_blocks + 1)]
            + ["total", "grad_norm", "wall_time"])


def _write_csv(path: Path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


CURVE_FIELDS = ["epoch", "train_contrastive", "train_total", "val_infonce"]


def _write_logs(out: Path, rows: list[dict], curves: list[dict], fieldnames: list[str]) -> None:
    _write_csv(out / "train_log.csv", rows, fieldnames)
    _write_csv(out / "loss_curves.csv", curves, CURVE_FIELDS)


def read_logs(out_dir, upto_epoch: int) -> tuple[list[dict], list[dict]]:
    """Training log rows and epoch curves already on disk, truncated to ``upto_epoch``."""
    out = Path(out_dir)

    def parse(path):
        if not path.exists():
            return []
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
        return [r for r in rows if r["epoch"] <= upto_epoch]

    return parse(out / "train_log.csv"), parse(out / "loss_curves.csv")


def run_pretraining(
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    train_images: np.ndarray,
    val_images: np.ndarray | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    step_callback=None,
    prior_curves: list[dict] | None = None,
    prior_rows: list[dict] | None = None,
) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs; persist best/last checkpoints and CSV curves under ``out_dir``.

    When resuming, ``prior_curves`` and ``prior_rows`` hold the logs of the epochs
    already completed so that the written curves cover the whole run.
    """
    if len(train_images) < cfg.batch_size:
        raise DataError(f"training set has {len(train_images)} images, fewer than one batch of {cfg.batch_size}")
    state = resume if resume is not None else Checkpoint.initialize(cfg, encoder_cfg)
    # a resumed run continues under the current config (e.g. a raised epoch budget)
    state.train_config = cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    nblocks = state.encoder_config.num_blocks
    prefix = "bt" if cfg.mode == "moco+bt" else "mse"
    fieldnames = log_fieldnames(cfg, nblocks)
    rows: list[dict] = list(prior_rows or [])
    curves: list[dict] = list(prior_curves or [])
    best_val, best_epoch = None, None
    for c in curves:
        if not np.isnan(c["val_infonce"]) and (best_val is None or c["val_infonce"] < best_val):
            best_val, best_epoch = c["val_infonce"], c["epoch"]
    val_seed = cfg.seed + 1_000_003
    state.pair.query.train()
    state.pair.key.train()

    start_epoch = state.epoch
    for epoch in range(start_epoch, cfg.epochs):
        order = state.rng.permutation(len(train_images))
        n_batches = len(order) // cfg.batch_size
        epoch_c, epoch_t = [], []
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            t0 = time.perf_counter()
            report = train_step(state.pair, state.queue, state.optimizer, train_images[idx], cfg, state.rng)
            state.step += 1
            row = {"epoch": epoch + 1, "step": state.step, "contrastive_loss": report.contrastive}
            row.update({f"{prefix}_block{b + 1}": v for b, v in enumerate(report.intermediate)})
            row.update(total=report.total, grad_norm=report.grad_norm, wall_time=time.perf_counter() - t0)
            rows.append(row)
            epoch_c.append(report.contrastive)
            epoch_t.append(report.total)
            if step_callback is not None:
                step_callback(state, report)
        state.epoch = epoch + 1
        val = (validation_infonce(state.pair, state.queue, val_images, cfg, val_seed)
               if val_images is not None and len(val_images) else float("nan"))
        curves.append({"epoch": epoch + 1, "train_contrastive": float(np.mean(epoch_c)),
                       "train_total": float(np.mean(epoch_t)), "val_infonce": val})
        log.info("epoch %d: train InfoNCE %.4f, val InfoNCE %.4f", epoch + 1, curves[-1]["train_contrastive"], val)
        if not np.isnan(val) and (best_val is None or val < best_val):
            best_val, best_epoch = val, epoch + 1
            if out is not None:
                state.save(out / "best.ckpt")
        if out is not None:
            state.save(out / "last.ckpt")
            _write_logs(out, rows, curves, fieldnames)

    if out is not None:
        if start_epoch >= cfg.epochs:
            state.save(out / "last.ckpt")
        if best_epoch is None:
            state.save(out / "best.ckpt")
        _write_logs(out, rows, curves, fieldnames)
    return PretrainResult(state, curves, rows, best_epoch, best_val)
