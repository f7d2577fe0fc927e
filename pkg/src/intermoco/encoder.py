"""Block-structured convolutional encoder, projector heads and the query/key pair."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor, no_grad


@dataclass
class EncoderConfig:
    num_blocks: int = 4
    channels_per_block: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3
    input_size: tuple[int, int] = (32, 32)
    embedding_dim: int = 128
    # 32x32 input scaled from the 16/16/4/4 ResNet-50 schedule
    block_pool_sizes: tuple[tuple[int, int], ...] = ((8, 8), (8, 8), (2, 2), (2, 2))
    head_layers: int = 1
    bt_projectors: bool = False
    bt_dim: int = 2048
    dtype: str = "float32"

    def __post_init__(self):
        self.channels_per_block = tuple(int(c) for c in self.channels_per_block)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.block_pool_sizes = tuple(tuple(int(v) for v in s) for s in self.block_pool_sizes)
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if len(self.channels_per_block) != self.num_blocks:
            raise ConfigError(f"channels_per_block has {len(self.channels_per_block)} entries, expected {self.num_blocks}")
        if len(self.block_pool_sizes) != self.num_blocks:
            raise ConfigError(f"block_pool_sizes has {len(self.block_pool_sizes)} entries, expected {self.num_blocks}")
        if self.embedding_dim <= 0 or self.bt_dim <= 0:
            raise ConfigError("embedding_dim and bt_dim must be positive")
        if self.head_layers not in (1, 2):
            raise ConfigError("head_layers must be 1 or 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        sizes = self.tap_sizes()
        for b, ((h, w), (ph, pw)) in enumerate(zip(sizes, self.block_pool_sizes), start=1):
            if ph > h or pw > w or ph < 1 or pw < 1:
                raise ConfigError(f"block {b}: pool size {ph}x{pw} invalid for a {h}x{w} tap")

    def tap_sizes(self) -> list[tuple[int, int]]:
        """Spatial size of each block output (every block halves H and W)."""
        h, w = self.input_size
        sizes = []
        for _ in range(self.num_blocks):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_block"] = list(self.channels_per_block)
        d["input_size"] = list(self.input_size)
        d["block_pool_sizes"] = [list(s) for s in self.block_pool_sizes]
        return d


class ConvBlock(Module):
    """conv3x3/2 -> BN -> ReLU -> conv3x3 -> BN -> ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=2, padding=1, dtype=dtype)
        self.bn1 = BatchNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1(self.conv1(x)).relu()
        return self.bn2(self.conv2(x)).relu()


class BtProjector(Module):
    """Three affine layers to ``dim``; the first two followed by ReLU then BN."""

    def __init__(self, in_features: int, rng: np.random.Generator, dim: int = 2048, dtype=np.float32):
        self.fc1 = Linear(in_features, dim, rng, dtype=dtype)
        self.bn1 = BatchNorm(dim, dtype=dtype)
        self.fc2 = Linear(dim, dim, rng, dtype=dtype)
        self.bn2 = BatchNorm(dim, dtype=dtype)
        self.fc3 = Linear(dim, dim, rng, dtype=dtype)
        self.in_features = in_features

    def forward(self, pooled: Tensor) -> Tensor:
        x = self.bn1(self.fc1(pooled).relu())
        x = self.bn2(self.fc2(x).relu())
        return self.fc3(x)


def bt_project(tap: Tensor, projector: BtProjector) -> Tensor:
    """Global-average-pool a B×C×H×W tap and map it through ``projector``."""
    if tap.ndim != 4 or tap.shape[1] != projector.in_features:
        raise DimensionError(f"bt_project: tap {tap.shape} does not match projector input {projector.in_features}")
    return projector(T.global_avg_pool2d(tap))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        blocks = []
        cin = config.in_channels
        for cout in config.channels_per_block:
            blocks.append(ConvBlock(cin, cout, rng, dtype))
            cin = cout
        self.blocks = blocks
        if config.head_layers == 1:
            self.head = [Linear(cin, config.embedding_dim, rng, dtype=dtype)]
        else:
            self.head = [Linear(cin, cin, rng, dtype=dtype), Linear(cin, config.embedding_dim, rng, dtype=dtype)]
        self.projectors = (
            [BtProjector(c, rng, config.bt_dim, dtype) for c in config.channels_per_block]
            if config.bt_projectors else []
        )

    @property
    def feature_dim(self) -> int:
        return self.config.channels_per_block[-1]

    def _check_input(self, images: Tensor) -> None:
        cfg = self.config
        expected = (cfg.in_channels, *cfg.input_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise DimensionError(f"encoder expects B×{expected[0]}×{expected[1]}×{expected[2]}, got {images.shape}")

    def forward_taps(self, images: Tensor, upto: int | None = None) -> list[Tensor]:
        """Block outputs, shallow to deep, stopping after block ``upto`` (1-based)."""
        self._check_input(images)
        x = images if images.dtype == np.dtype(self.config.dtype) else Tensor(images.data, dtype=self.config.dtype)
        taps = []
        for block in self.blocks[: upto or len(self.blocks)]:
            x = block(x)
            taps.append(x)
        return taps

    def embed(self, final_tap: Tensor) -> Tensor:
        x = T.global_avg_pool2d(final_tap)
        for i, layer in enumerate(self.head):
            if i:
                x = x.relu()
            x = layer(x)
        return x

    def forward_with_taps(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        taps = self.forward_taps(images)
        return self.embed(taps[-1]), taps

    def forward(self, images: Tensor) -> Tensor:
        return self.forward_with_taps(images)[0]


@dataclass
class MomentumPair:
    """Query encoder ``g`` and its exponential-moving-average copy ``h``."""

    query: Encoder
    key: Encoder = field(default=None)
    momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"encoder momentum must be in [0, 1], got {self.momentum}")
        if self.key is None:
            self.key = copy.deepcopy(self.query)
        self.key.requires_grad_(False)
        q_shapes = [(n, p.shape) for n, p in self.query.named_parameters()]
        k_shapes = [(n, p.shape) for n, p in self.key.named_parameters()]
        if q_shapes != k_shapes:
            raise DimensionError("query and key encoders are not structurally identical")

    def ema_update(self) -> None:
        ema_update(self)


def ema_update(pair: MomentumPair) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q for every parameter."""
    m = pair.momentum
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"encoder momentum must be in [0, 1], got {m}")
    with no_grad():
        for pk, pq in zip(pair.key.parameters(), pair.query.parameters()):
            if m == 0.0:
                pk.data = pq.data.copy()
            elif m != 1.0:
                pk.data = m * pk.data + (1.0 - m) * pq.data
