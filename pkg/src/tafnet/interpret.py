"""Post-hoc interpretability: spatial attention maps, gate coefficient
profiles, and gate-prediction correlation analysis.

The attention reduction sums the head-averaged matrix over the query axis,
i.e. it measures attention *received* by each follow-up position. Summing
over keys instead would always give 1 per query (softmax rows), which is a
constant, uninformative map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .core import Cohort, Volume
from .errors import CorrelationUndefinedError, StateError
from .fusion import GateCoefficients, TafNet
from .nnkit import Tensor

_CONST_TOL = 1e-12


@dataclass(frozen=True)
class AttentionMap:
    """Input-resolution attention heatmap normalized to [0, 1].

    `source` is the pre-normalization bottleneck-grid map; `mass` its total
    (equals the token count up to numerical error). A constant source map
    normalizes to all zeros with `degenerate` set instead of dividing by 0.
    """

    grid: np.ndarray
    source: np.ndarray
    mass: float
    degenerate: bool


@dataclass(frozen=True)
class GateProfile:
    subject_id: str
    gates: GateCoefficients
    probability: float
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.probability < 1.0:
            raise StateError(f"probability must lie in (0, 1), got {self.probability}")


def upsample_trilinear(src: np.ndarray, target: int) -> np.ndarray:
    """Trilinear upsampling where target index j samples source coord j*s/t.

    Source lattice points land exactly on every (t//s)-th target index;
    coordinates past the last source node clamp to the edge value.
    """
    s = src.shape[0]
    scale = target / s
    axis = np.arange(target, dtype=np.float64) / scale
    coords = np.meshgrid(axis, axis, axis, indexing="ij")
    return ndimage.map_coordinates(
        src.astype(np.float64), np.stack(coords), order=1, mode="nearest"
    )


def extract_attention_map(model: TafNet, pair: tuple[Volume, Volume]) -> AttentionMap:
    """Head-averaged received-attention map, upsampled to input resolution."""
    if not getattr(model, "is_trained", False):
        raise StateError("attention extraction requires a trained model")
    if model.encoder is None:
        raise StateError("model has no encoder attached")
    model.eval()
    bl, fu = pair
    grid = bl.data.shape[0]
    x_bl = Tensor(bl.data.astype(np.float64)[None, None])
    x_fu = Tensor(fu.data.astype(np.float64)[None, None])
    _, tfm_out = model.forward_volumes(x_bl, x_fu)
    mean_heads = tfm_out.attention[0].mean(axis=0)
    received = mean_heads.sum(axis=0)
    mass = float(received.sum())
    side = model.encoder.cfg.bottleneck_side
    source = received.reshape(side, side, side)
    upsampled = upsample_trilinear(source, grid)
    lo, hi = upsampled.min(), upsampled.max()
    if hi - lo < _CONST_TOL:
        return AttentionMap(
            grid=np.zeros_like(upsampled), source=source, mass=mass, degenerate=True
        )
    return AttentionMap(
        grid=(upsampled - lo) / (hi - lo), source=source, mass=mass, degenerate=False
    )


def extract_gates(model: TafNet, cohort: Cohort, covariates: dict | None = None) -> list[GateProfile]:
    """One gate/probability profile per cohort pair (deterministic, eval mode)."""
    if not getattr(model, "is_trained", False):
        raise StateError("gate extraction requires a trained model")
    if model.encoder is None:
        raise StateError("model has no encoder attached")
    from .trainer import cohort_features

    model.eval()
    features = cohort_features(model.encoder, cohort)
    profiles = []
    for p in cohort.pairs:
        f_bl = Tensor(features[p.baseline_ref][None])
        f_fu = Tensor(features[p.followup_ref][None])
        prob, tfm_out = model.forward_detailed(f_bl, f_fu)
        profiles.append(
            GateProfile(
                subject_id=p.subject_id,
                gates=tfm_out.gate_coefficients()[0],
                probability=float(prob.data[0]),
                covariates=dict(covariates.get(p.subject_id, {})) if covariates else {},
            )
        )
    return profiles


COEFFICIENTS = ("alpha", "beta", "gamma")


def gate_summary(profiles) -> dict:
    """Per-coefficient mean/std/min/max, one-sample t-test vs the uniform 1/3
    baseline, and a dominance tally (argmax per profile, alpha>beta>gamma
    tie order)."""
    profiles = list(profiles)
    rows = {}
    for name in COEFFICIENTS:
        vals = np.array([getattr(p.gates, name) for p in profiles])
        t_res = stats.ttest_1samp(vals, 1.0 / 3.0)
        rows[name] = {
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "p_vs_uniform": float(t_res.pvalue),
        }
    tally = {name: 0 for name in COEFFICIENTS}
    for p in profiles:
        tally[p.gates.dominant()] += 1
    return {"coefficients": rows, "dominance": tally, "n": len(profiles)}


def gate_correlation(profiles) -> dict[str, tuple[float, float]]:
    """Pearson r (and two-sided t-distribution p) of each gate coefficient
    against the predicted conversion probability."""
    profiles = list(profiles)
    n = len(profiles)
    if n < 3:
        raise CorrelationUndefinedError(f"need >= 3 profiles, got {n}")
    probs = np.array([p.probability for p in profiles])
    if probs.std() < _CONST_TOL:
        raise CorrelationUndefinedError("predicted probabilities are constant")
    out = {}
    for name in COEFFICIENTS:
        vals = np.array([getattr(p.gates, name) for p in profiles])
        if vals.std() < _CONST_TOL:
            raise CorrelationUndefinedError(f"{name} is constant across profiles")
        vc = vals - vals.mean()
        pc = probs - probs.mean()
        r = float((vc * pc).sum() / np.sqrt((vc**2).sum() * (pc**2).sum()))
        if abs(r) >= 1.0:
            p_val = 0.0
        else:
            t = r * np.sqrt((n - 2) / (1.0 - r**2))
            p_val = float(2.0 * stats.t.sf(abs(t), df=n - 2))
        out[name] = (r, p_val)
    return out


def save_overlay(base: Volume, attn: AttentionMap, path) -> None:
    """Axial/coronal/sagittal mid-slice grayscale images with a heat overlay."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = base.data
    heat = attn.grid
    mids = [s // 2 for s in data.shape]
    slicers = [
        (data[mids[0], :, :], heat[mids[0], :, :], "axial"),
        (data[:, mids[1], :], heat[:, mids[1], :], "coronal"),
        (data[:, :, mids[2]], heat[:, :, mids[2]], "sagittal"),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (gray, h, title) in zip(axes, slicers):
        ax.imshow(gray.T, cmap="gray", origin="lower")
        ax.imshow(h.T, cmap="hot", origin="lower", alpha=0.45)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
