"""Comparison models that share the frozen encoder with the full network:
elementwise-subtraction head, bidirectional-LSTM head, and a baseline-only
head that never consumes the follow-up scan.
"""

from __future__ import annotations

import numpy as np

from .core import Rng
from .errors import ShapeError
from .fusion import ClassifierHead, branch_diff
from .nnkit import Affine, Module, Tensor, concat, gap, relu, reshape, sigmoid, tanh
from .nnkit import tensor as T


class SiameseSubtract(Module):
    """Feature difference straight into a fresh classification head."""

    def __init__(self, channels: int = 128, head_hidden: int = 64,
                 head_dropout: float = 0.3, seed: int = 0):
        super().__init__()
        self.head = ClassifierHead(channels, head_hidden, head_dropout, seed=seed)
        self.is_trained = False

    def forward_features(self, f_bl: Tensor, f_m12: Tensor) -> Tensor:
        return self.head.forward(branch_diff(f_bl, f_m12))


class LstmCell(Module):
    """Single LSTM cell with per-gate weight matrices."""

    GATES = ("i", "f", "g", "o")

    def __init__(self, input_size: int, hidden: int, rng: Rng):
        super().__init__()
        self.input_size, self.hidden = input_size, hidden
        bound = 1.0 / np.sqrt(hidden)
        for name in self.GATES:
            setattr(self, f"w_{name}",
                    self.param(f"w_{name}", rng.uniform(-bound, bound, (input_size, hidden))))
            setattr(self, f"u_{name}",
                    self.param(f"u_{name}", rng.uniform(-bound, bound, (hidden, hidden))))
            setattr(self, f"b_{name}",
                    self.param(f"b_{name}", rng.uniform(-bound, bound, (hidden,))))

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        def gate(name, activation):
            pre = T.add(
                T.add(T.matmul(x, getattr(self, f"w_{name}")),
                      T.matmul(h, getattr(self, f"u_{name}"))),
                getattr(self, f"b_{name}"),
            )
            return activation(pre)

        i = gate("i", sigmoid)
        f = gate("f", sigmoid)
        g = gate("g", tanh)
        o = gate("o", sigmoid)
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        h_new = T.mul(o, tanh(c_new))
        return h_new, c_new


class CnnLstm(Module):
    """Bidirectional recurrence over the two pooled feature vectors.

    The bidirectional outputs of both timesteps (2 x 2 x hidden) are
    concatenated into one 4*hidden vector for the affine head.
    """

    def __init__(self, channels: int = 128, hidden: int = 64, head_hidden: int = 64,
                 seed: int = 0):
        super().__init__()
        rng = Rng(seed)
        self.hidden = hidden
        self.fwd = LstmCell(channels, hidden, rng)
        self.bwd = LstmCell(channels, hidden, rng)
        self.fc1 = Affine(4 * hidden, head_hidden, rng=rng)
        self.fc2 = Affine(head_hidden, 1, rng=rng)
        self.is_trained = False

    def forward_features(self, f_bl: Tensor, f_m12: Tensor) -> Tensor:
        if f_bl.data.shape != f_m12.data.shape:
            raise ShapeError(
                f"paired feature shapes differ: {f_bl.data.shape} vs {f_m12.data.shape}"
            )
        x1, x2 = gap(f_bl), gap(f_m12)
        bsz = x1.data.shape[0]
        zero = Tensor(np.zeros((bsz, self.hidden)))
        h1f, c1f = self.fwd.step(x1, zero, zero)
        h2f, _ = self.fwd.step(x2, h1f, c1f)
        h2b, c2b = self.bwd.step(x2, zero, zero)
        h1b, _ = self.bwd.step(x1, h2b, c2b)
        states = concat([h1f, h1b, h2f, h2b], axis=1)
        p = sigmoid(self.fc2.forward(relu(self.fc1.forward(states))))
        return reshape(p, (-1,))


class InitialOnly(Module):
    """Single-timepoint reference: classifies baseline features directly."""

    def __init__(self, channels: int = 128, head_hidden: int = 64,
                 head_dropout: float = 0.3, seed: int = 0):
        super().__init__()
        self.head = ClassifierHead(channels, head_hidden, head_dropout, seed=seed)
        self.is_trained = False

    def forward_features(self, f_bl: Tensor, f_m12: Tensor | None = None) -> Tensor:
        return self.head.forward(f_bl)
