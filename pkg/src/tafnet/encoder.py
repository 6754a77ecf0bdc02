"""Five-block 3D CNN encoder with dynamic contextual channel attention.

Both timepoints of a pair go through one weight-shared instance, so equal
inputs map to identical features and feature differences reflect input
change only. Each block is conv3-BN-LeakyReLU twice, channel recalibration,
then 2^3 max pooling after blocks 1-4; skip features are returned for API
completeness although nothing downstream consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Rng
from .errors import ConfigError, ShapeError
from .nnkit import (
    Affine,
    BatchNorm3d,
    Conv3d,
    Module,
    Tensor,
    gap,
    leaky_relu,
    maxpool3d,
    relu,
    reshape,
    sigmoid,
)
from .nnkit import tensor as T


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    input_grid: int = 128
    dcca_enabled: bool = True
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 5 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be 5 positive ints, got {self.channels}")
        if self.input_grid % 16 != 0 or self.input_grid < 16:
            raise ConfigError(
                f"input_grid must be a positive multiple of 16, got {self.input_grid}"
            )

    @property
    def bottleneck_side(self) -> int:
        return self.input_grid // 16

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]


class ChannelAttention(Module):
    """Contextual channel recalibration: h * sigmoid(FC(GAP(conv stack(h)))).

    The context pathway is two channel-preserving 3^3 convolutions with
    ReLU; the FC maps C -> C. Weights lie in (0, 1), so recalibration can
    only damp activations.
    """

    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        self.conv1 = Conv3d(channels, channels, kernel=3, padding="same", rng=rng)
        self.conv2 = Conv3d(channels, channels, kernel=3, padding="same", rng=rng)
        self.fc = Affine(channels, channels, rng=rng)

    def forward(self, h: Tensor) -> Tensor:
        t = relu(self.conv1.forward(h))
        t = relu(self.conv2.forward(t))
        w = sigmoid(self.fc.forward(gap(t)))
        c = w.shape[-1]
        return T.mul(h, reshape(w, (-1, c, 1, 1, 1)))


class EncoderBlock(Module):
    def __init__(self, cin: int, cout: int, slope: float, dcca: bool, rng: Rng):
        super().__init__()
        self.slope = slope
        self.conv_a = Conv3d(cin, cout, kernel=3, padding="same", bias=False, rng=rng)
        self.bn_a = BatchNorm3d(cout)
        self.conv_b = Conv3d(cout, cout, kernel=3, padding="same", bias=False, rng=rng)
        self.bn_b = BatchNorm3d(cout)
        self.dcca = ChannelAttention(cout, rng) if dcca else None

    def forward(self, h: Tensor) -> Tensor:
        h = leaky_relu(self.bn_a.forward(self.conv_a.forward(h)), self.slope)
        h = leaky_relu(self.bn_b.forward(self.conv_b.forward(h)), self.slope)
        if self.dcca is not None:
            h = self.dcca.forward(h)
        return h


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        rng = Rng(seed)
        chans = self.cfg.channels
        self.blocks = [
            EncoderBlock(
                cin=1 if i == 0 else chans[i - 1],
                cout=chans[i],
                slope=self.cfg.leaky_slope,
                dcca=self.cfg.dcca_enabled,
                rng=rng,
            )
            for i in range(5)
        ]

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Run one volume batch (B, 1, g, g, g) to the bottleneck.

        Returns the (B, C, g/16, g/16, g/16) feature map and the five
        pre-pooling skip feature maps.
        """
        g = self.cfg.input_grid
        if x.data.ndim != 5 or x.data.shape[1] != 1 or x.data.shape[2:] != (g, g, g):
            raise ShapeError(
                f"encoder expects (B, 1, {g}, {g}, {g}), got {x.data.shape}"
            )
        h = x
        skips = []
        for i, block in enumerate(self.blocks):
            h = block.forward(h)
            skips.append(h)
            if i < 4:
                h = maxpool3d(h, 2)
        return h, skips

    def encode_volume(self, data: np.ndarray) -> np.ndarray:
        """Convenience eval-mode encode of one raw (g, g, g) array."""
        f, _ = self.encode(Tensor(data[None, None].astype(np.float64)))
        return f.data[0]
