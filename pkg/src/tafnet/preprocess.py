"""Deterministic volume preprocessing: masking, normalization, denoising,
resampling, quality control, and synchronized pair augmentation.

Brain extraction and template registration are pluggable stage interfaces;
the defaults (threshold extractor, identity registration) let the pipeline
run end-to-end on phantom data without external binaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Rng, Volume
from .errors import (
    DataError,
    DegenerateIntensityError,
    ParamError,
    ShapeError,
)

DEFAULT_TAU = 0.5
DEFAULT_SIGMA = 0.5
# minimum brain-voxel count at the reference 128^3 grid; scaled for smaller grids
MIN_NONZERO_AT_128 = 100_000


@dataclass(frozen=True)
class BrainMask:
    """Binary brain mask with its cached voxel count."""

    mask: np.ndarray
    nonzero_count: int

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask, dtype=np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        if int(m.sum()) != self.nonzero_count:
            raise DataError("nonzero_count does not match mask")


@dataclass(frozen=True)
class QcReport:
    dims_ok: bool
    range_ok: bool
    brain_fraction_ok: bool
    nonzero_count: int
    flags: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.dims_ok and self.range_ok and self.brain_fraction_ok


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angles_deg: tuple[float, float, float]
    intensity_scale: float

    def __post_init__(self):
        if any(abs(a) > 5.0 for a in self.angles_deg):
            raise ParamError(f"rotation angles outside [-5, 5]: {self.angles_deg}")
        if not 0.95 <= self.intensity_scale <= 1.05:
            raise ParamError(f"intensity scale outside [0.95, 1.05]: {self.intensity_scale}")


IDENTITY_AUGMENT = AugmentParams(flip=False, angles_deg=(0.0, 0.0, 0.0), intensity_scale=1.0)


class ThresholdExtractor:
    """Default extraction stage: probability 1 wherever intensity > 0."""

    name = "threshold"

    def probability_map(self, v: Volume) -> Volume:
        return Volume((v.data > 0).astype(np.float32), spacing=v.spacing)


class IdentityRegistration:
    """Default registration stage: returns the moving volume unchanged."""

    name = "identity"

    def apply(self, v: Volume, template: Volume | None = None) -> Volume:
        return v


def apply_mask(v: Volume, p: Volume, tau: float = DEFAULT_TAU) -> tuple[BrainMask, Volume]:
    """Threshold probability map `p` at `tau` and zero out non-brain voxels."""
    if v.shape != p.shape:
        raise ShapeError(f"volume {v.shape} and probability map {p.shape} differ")
    pd = p.data
    if pd.min() < 0.0 or pd.max() > 1.0:
        raise DataError("probability map has values outside [0, 1]")
    mask = (pd > tau).astype(np.uint8)
    out = v.data * mask
    return (
        BrainMask(mask=mask, nonzero_count=int(mask.sum())),
        Volume(out, spacing=v.spacing, intensity_range_tag=v.intensity_range_tag),
    )


def minmax_normalize(v: Volume) -> Volume:
    """Map brain voxels (v > 0) to [0, 1]; background stays exactly 0."""
    data = v.data.astype(np.float64)
    brain = data > 0
    if not brain.any():
        raise DataError("volume has no positive voxels to normalize")
    vals = data[brain]
    vmin, vmax = vals.min(), vals.max()
    if vmax == vmin:
        raise DegenerateIntensityError(
            "constant brain intensity; min-max normalization undefined"
        )
    out = np.zeros_like(data)
    out[brain] = (vals - vmin) / (vmax - vmin)
    return Volume(out.astype(np.float32), spacing=v.spacing, intensity_range_tag="unit")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3*sigma), renormalized to sum 1."""
    if sigma <= 0:
        raise ParamError(f"sigma must be > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_denoise(v: Volume, sigma: float = DEFAULT_SIGMA, mask: np.ndarray | None = None) -> Volume:
    """Separable 3D Gaussian smoothing with zero-padded boundaries.

    `mask` is the brain-voxel set frozen *before* smoothing (defaults to
    v > 0); its complement is reset to exactly 0 afterwards.
    """
    k = gaussian_kernel_1d(sigma)
    if mask is None:
        mask = v.data > 0
    elif mask.shape != v.shape:
        raise ShapeError(f"mask shape {mask.shape} != volume shape {v.shape}")
    out = v.data.astype(np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
    out[~np.asarray(mask, dtype=bool)] = 0.0
    return Volume(out.astype(np.float32), spacing=v.spacing, intensity_range_tag=v.intensity_range_tag)


def noise_estimate(v: Volume) -> float:
    """Root mean of the three finite-difference variances."""
    if min(v.shape) < 2:
        raise ShapeError(f"noise estimate needs >= 2 voxels per axis, got {v.shape}")
    data = v.data.astype(np.float64)
    variances = [np.diff(data, axis=a).var() for a in range(3)]
    return float(np.sqrt(np.mean(variances)))


def center_crop_pad(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Symmetrically crop oversized axes and zero-pad undersized ones."""
    if len(target) != 3 or any(t < 1 for t in target):
        raise ParamError(f"target must be 3 positive ints, got {target}")
    data = v.data
    for axis, t in enumerate(target):
        s = data.shape[axis]
        if s > t:
            start = (s - t) // 2
            data = np.take(data, range(start, start + t), axis=axis)
        elif s < t:
            before = (t - s) // 2
            after = t - s - before
            pad = [(0, 0)] * 3
            pad[axis] = (before, after)
            data = np.pad(data, pad)
    return Volume(data, spacing=v.spacing, intensity_range_tag=v.intensity_range_tag)


def default_min_nonzero(shape: tuple[int, int, int]) -> int:
    """Scale the 128^3 reference threshold proportionally to voxel count."""
    voxels = int(np.prod(shape))
    return max(1, round(MIN_NONZERO_AT_128 * voxels / 128**3))


def qc_check(v: Volume, expected_shape: tuple[int, int, int], min_nonzero: int) -> QcReport:
    """Automated quality gates; reports, never raises."""
    data = v.data
    dims_ok = tuple(data.shape) == tuple(expected_shape)
    range_ok = bool(data.min() >= 0.0 and data.max() <= 1.0)
    nonzero = int(np.count_nonzero(data))
    brain_ok = nonzero >= min_nonzero
    flags = []
    if not dims_ok:
        flags.append(f"bad_dims:{data.shape}")
    if not range_ok:
        flags.append("intensity_outside_unit_range")
    if not brain_ok:
        flags.append(f"brain_voxels_below_{min_nonzero}")
    return QcReport(
        dims_ok=dims_ok,
        range_ok=range_ok,
        brain_fraction_ok=brain_ok,
        nonzero_count=nonzero,
        flags=tuple(flags),
    )


def _rotation_matrix(angles_deg) -> np.ndarray:
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def apply_augment(v: Volume, params: AugmentParams) -> Volume:
    """Apply a fixed augmentation: flip (last axis), rotate, scale intensity."""
    out = v.data.astype(np.float64)
    if params.flip:
        out = out[:, :, ::-1]
    if any(a != 0.0 for a in params.angles_deg):
        rot = _rotation_matrix(params.angles_deg)
        center = (np.array(out.shape, dtype=np.float64) - 1.0) / 2.0
        # affine_transform maps output coords to input coords: x_in = M x_out + offset
        m = rot.T
        offset = center - m @ center
        out = ndimage.affine_transform(
            out, m, offset=offset, order=1, mode="constant", cval=0.0
        )
    out = out * params.intensity_scale
    # scaling can push unit-range data above 1, so outputs are tagged raw
    return Volume(out.astype(np.float32), spacing=v.spacing)


def augment_pair(
    bl: Volume, fu: Volume, rng: Rng, enabled: bool = True
) -> tuple[Volume, Volume, AugmentParams]:
    """Sample one augmentation and apply it identically to both volumes.

    Flip with p=0.5 (last axis), per-axis rotations U[-5, 5] degrees with
    trilinear resampling (outside the source treated as 0), and a shared
    multiplicative intensity scale U[0.95, 1.05]. With enabled=False the
    inputs are returned untouched (evaluation path).
    """
    if bl.shape != fu.shape:
        raise ShapeError(f"pair shapes differ: {bl.shape} vs {fu.shape}")
    if not enabled:
        return bl, fu, IDENTITY_AUGMENT
    params = AugmentParams(
        flip=bool(rng.uniform() < 0.5),
        angles_deg=tuple(rng.uniform(-5.0, 5.0, 3)),
        intensity_scale=float(rng.uniform(0.95, 1.05)),
    )
    return apply_augment(bl, params), apply_augment(fu, params), params


@dataclass(frozen=True)
class PreprocessResult:
    volume: Volume
    qc: QcReport
    noise_before: float
    noise_after: float


def preprocess_volume(
    v: Volume,
    target: tuple[int, int, int],
    extractor=None,
    registration=None,
    template: Volume | None = None,
    tau: float = DEFAULT_TAU,
    sigma: float = DEFAULT_SIGMA,
    min_nonzero: int | None = None,
) -> PreprocessResult:
    """Run the full deterministic pipeline on one volume.

    Stages: extraction probability map -> mask at tau -> registration ->
    brain-voxel min-max normalization -> Gaussian denoise (background mask
    frozen pre-smoothing) -> center crop/pad to `target` -> QC gates.
    """
    extractor = extractor or ThresholdExtractor()
    registration = registration or IdentityRegistration()
    p = extractor.probability_map(v)
    _, masked = apply_mask(v, p, tau=tau)
    registered = registration.apply(masked, template)
    normalized = minmax_normalize(registered)
    brain = registered.data > 0
    noise_before = noise_estimate(normalized)
    smoothed = gaussian_denoise(normalized, sigma=sigma, mask=brain)
    noise_after = noise_estimate(smoothed)
    resampled = center_crop_pad(smoothed, target)
    if min_nonzero is None:
        min_nonzero = default_min_nonzero(target)
    qc = qc_check(resampled, target, min_nonzero)
    return PreprocessResult(
        volume=resampled, qc=qc, noise_before=noise_before, noise_after=noise_after
    )
