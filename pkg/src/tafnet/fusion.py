"""Temporal fusion of paired bottleneck features.

Three complementary branches (elementwise difference, cross-temporal
multi-head attention with baseline queries, channel concatenation + 1^3
convolution) are mixed per sample by a softmax gate conditioned on pooled
descriptors of both timepoints, then added to a baseline residual:

    f_out = alpha * diff + beta * att + gamma * cat + f_baseline
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Rng
from .encoder import Encoder
from .errors import DataError, ShapeError
from .nnkit import (
    Affine,
    Conv3d,
    Dropout,
    Module,
    MultiHeadAttention,
    Tensor,
    concat,
    gap,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)
from .nnkit import tensor as T

GATE_TOL = 1e-6


@dataclass(frozen=True)
class GateCoefficients:
    """Per-sample mixture weights on the probability simplex."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise DataError(f"gate coefficients outside [0, 1]: {vals}")
        if abs(sum(vals) - 1.0) > GATE_TOL:
            raise DataError(f"gate coefficients do not sum to 1: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    def dominant(self) -> str:
        """Branch with the largest weight; ties break in alpha>beta>gamma order."""
        return ("alpha", "beta", "gamma")[int(np.argmax(self.as_array()))]


@dataclass(frozen=True)
class TfmOutput:
    """Fused features plus the interpretability signals of one forward pass."""

    fused: Tensor
    gates: Tensor
    attention: np.ndarray

    def __post_init__(self):
        rows = self.attention.sum(axis=-1)
        if not np.allclose(rows, 1.0, atol=GATE_TOL):
            raise DataError("attention rows do not sum to 1")

    def gate_coefficients(self) -> list[GateCoefficients]:
        return [GateCoefficients(*row) for row in self.gates.data]


def _check_pair_shapes(f_bl: Tensor, f_m12: Tensor) -> None:
    if f_bl.data.shape != f_m12.data.shape:
        raise ShapeError(
            f"paired feature shapes differ: {f_bl.data.shape} vs {f_m12.data.shape}"
        )


def branch_diff(f_bl: Tensor, f_m12: Tensor) -> Tensor:
    """Explicit structural change: follow-up minus baseline."""
    _check_pair_shapes(f_bl, f_m12)
    return T.sub(f_m12, f_bl)


def to_tokens(f: Tensor) -> Tensor:
    """(B, C, s, s, s) -> (B, s^3, C): spatial positions become tokens."""
    b, c = f.data.shape[:2]
    t = int(np.prod(f.data.shape[2:]))
    return reshape(transpose(f, (0, 2, 3, 4, 1)), (b, t, c))


def from_tokens(tok: Tensor, spatial: tuple[int, int, int]) -> Tensor:
    b, _, c = tok.data.shape
    return transpose(reshape(tok, (b, *spatial, c)), (0, 4, 1, 2, 3))


class CrossAttentionBranch(Module):
    """Baseline features query the follow-up's keys/values."""

    def __init__(self, d_model: int = 128, heads: int = 4, rng: Rng | None = None):
        super().__init__()
        self.mha = MultiHeadAttention(d_model, heads, rng=rng or Rng(0))

    def forward(self, f_bl: Tensor, f_m12: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair_shapes(f_bl, f_m12)
        spatial = f_bl.data.shape[2:]
        out_tok, attn = self.mha.forward(to_tokens(f_bl), to_tokens(f_m12), to_tokens(f_m12))
        return from_tokens(out_tok, spatial), attn


class ConcatBranch(Module):
    """Channel concatenation reduced back by a 1^3 convolution."""

    def __init__(self, channels: int = 128, rng: Rng | None = None):
        super().__init__()
        self.conv = Conv3d(2 * channels, channels, kernel=1, padding="valid",
                           rng=rng or Rng(0))

    def forward(self, f_bl: Tensor, f_m12: Tensor) -> Tensor:
        _check_pair_shapes(f_bl, f_m12)
        return self.conv.forward(concat([f_bl, f_m12], axis=1))


class AdaptiveGate(Module):
    """Softmax gate over the three fusion branches.

    Conditioning vector is the concatenation of global average pooled
    descriptors of both timepoints (2C), mapped 2C -> hidden -> 3.
    """

    def __init__(self, channels: int = 128, hidden: int = 64, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.fc1 = Affine(2 * channels, hidden, rng=rng)
        self.fc2 = Affine(hidden, 3, rng=rng)

    def forward(self, f_bl: Tensor, f_m12: Tensor) -> Tensor:
        _check_pair_shapes(f_bl, f_m12)
        g = concat([gap(f_bl), gap(f_m12)], axis=1)
        return softmax(self.fc2.forward(relu(self.fc1.forward(g))), axis=-1)

    def coefficients(self, f_bl: Tensor, f_m12: Tensor) -> list[GateCoefficients]:
        return [GateCoefficients(*row) for row in self.forward(f_bl, f_m12).data]


_SELECTORS = [np.eye(3)[:, i : i + 1] for i in range(3)]


class TemporalFusion(Module):
    def __init__(self, channels: int = 128, heads: int = 4, gate_hidden: int = 64,
                 rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.attention_branch = CrossAttentionBranch(channels, heads, rng=rng)
        self.concat_branch = ConcatBranch(channels, rng=rng)
        self.gate = AdaptiveGate(channels, gate_hidden, rng=rng)

    def forward(self, f_bl: Tensor, f_m12: Tensor, gate_override=None) -> TfmOutput:
        _check_pair_shapes(f_bl, f_m12)
        diff = branch_diff(f_bl, f_m12)
        att, attn_mats = self.attention_branch.forward(f_bl, f_m12)
        cat = self.concat_branch.forward(f_bl, f_m12)
        if gate_override is None:
            gates = self.gate.forward(f_bl, f_m12)
        else:
            forced = np.tile(np.asarray(gate_override, dtype=np.float64), (f_bl.data.shape[0], 1))
            gates = Tensor(forced)

        def weighted(branch: Tensor, i: int) -> Tensor:
            coeff = reshape(T.matmul(gates, _SELECTORS[i]), (-1, 1, 1, 1, 1))
            return T.mul(branch, coeff)

        fused = T.add(
            T.add(T.add(weighted(diff, 0), weighted(att, 1)), weighted(cat, 2)),
            f_bl,
        )
        return TfmOutput(fused=fused, gates=gates, attention=attn_mats.data)


class ClassifierHead(Module):
    """GAP -> dropout -> affine -> ReLU -> dropout -> affine -> sigmoid."""

    def __init__(self, channels: int = 128, hidden: int = 64, dropout: float = 0.3,
                 seed: int = 0):
        super().__init__()
        rng = Rng(seed)
        self.drop1 = Dropout(dropout, rng=rng.spawn(1))
        self.fc1 = Affine(channels, hidden, rng=rng)
        self.drop2 = Dropout(dropout, rng=rng.spawn(2))
        self.fc2 = Affine(hidden, 1, rng=rng)

    def forward(self, f: Tensor) -> Tensor:
        z = self.drop1.forward(gap(f))
        z = self.drop2.forward(relu(self.fc1.forward(z)))
        p = sigmoid(self.fc2.forward(z))
        return reshape(p, (-1,))


class TafNet(Module):
    """Full pair classifier: shared encoder -> temporal fusion -> head.

    The encoder is optional so the fusion/head stack can train on cached
    features while the encoder stays frozen elsewhere.
    """

    def __init__(self, encoder: Encoder | None = None, channels: int = 128,
                 heads: int = 4, gate_hidden: int = 64, head_hidden: int = 64,
                 head_dropout: float = 0.3, seed: int = 0):
        super().__init__()
        rng = Rng(seed)
        self.encoder = encoder
        self.tfm = TemporalFusion(channels, heads, gate_hidden, rng=rng)
        self.head = ClassifierHead(channels, head_hidden, head_dropout, seed=seed + 1)
        self.is_trained = False

    def forward_detailed(self, f_bl: Tensor, f_m12: Tensor,
                         gate_override=None) -> tuple[Tensor, TfmOutput]:
        tfm_out = self.tfm.forward(f_bl, f_m12, gate_override=gate_override)
        return self.head.forward(tfm_out.fused), tfm_out

    def forward_features(self, f_bl: Tensor, f_m12: Tensor) -> Tensor:
        return self.forward_detailed(f_bl, f_m12)[0]

    def forward_volumes(self, x_bl: Tensor, x_m12: Tensor) -> tuple[Tensor, TfmOutput]:
        if self.encoder is None:
            raise DataError("model was built without an encoder")
        f_bl, _ = self.encoder.encode(x_bl)
        f_m12, _ = self.encoder.encode(x_m12)
        return self.forward_detailed(f_bl, f_m12)

    def parameter_report(self) -> dict[str, int]:
        """Audited parameter counts per architectural section."""
        report = {
            "tfm.attention": self.tfm.attention_branch.parameter_count(),
            "tfm.concat": self.tfm.concat_branch.parameter_count(),
            "tfm.gate": self.tfm.gate.parameter_count(),
            "head": self.head.parameter_count(),
        }
        if self.encoder is not None:
            report["encoder"] = self.encoder.parameter_count()
        report["total"] = sum(report.values())
        return report
