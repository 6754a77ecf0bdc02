"""Phantom longitudinal cohorts with a controllable, change-only conversion
signal: sphere brain, ellipsoidal ventricle, two hippocampal blobs.

Converters expand the ventricle and shrink the hippocampal blobs in
proportion to the scan interval; stable subjects change only by noise.
With `baseline_matched` the baseline geometry distribution is identical
across classes, so all class signal lives in the change.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .core import Cohort, PairRecord, Rng, Volume, manifest_save, volume_write
from .errors import ParamError

TISSUE = 0.60
VENTRICLE = 0.15
HIPPOCAMPUS = 0.85
EDGE_WIDTH_VOX = 1.0
# extra baseline ventricle scale for converters when baseline_matched=False
UNMATCHED_BASELINE_SHIFT = 1.25


@dataclass(frozen=True)
class PhantomSpec:
    grid: int = 32
    brain_radius_frac: float = 0.85
    ventricle_axes_frac: tuple[float, float, float] = (0.18, 0.30, 0.24)
    hippocampus_offset_frac: float = 0.55
    hippocampus_radius_frac: float = 0.12
    noise_sigma: float = 0.02
    converter_expansion_rate: float = 0.015
    converter_shrink_rate: float = 0.008
    baseline_matched: bool = True
    geometry_jitter: float = 0.05
    pretrain_ad_ventricle_scale: float = 1.6

    def __post_init__(self):
        fracs = (
            self.brain_radius_frac,
            *self.ventricle_axes_frac,
            self.hippocampus_offset_frac,
            self.hippocampus_radius_frac,
        )
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ParamError(f"geometry fractions must lie in (0, 1), got {fracs}")
        if self.converter_expansion_rate < 0 or self.converter_shrink_rate < 0:
            raise ParamError("change rates must be >= 0")
        if not 0.0 <= self.geometry_jitter < 0.5:
            raise ParamError("geometry_jitter must lie in [0, 0.5)")
        if self.pretrain_ad_ventricle_scale <= 0:
            raise ParamError("pretrain_ad_ventricle_scale must be > 0")
        if self.hippocampus_offset_frac + self.hippocampus_radius_frac >= self.brain_radius_frac:
            raise ParamError("hippocampal blobs would fall outside the brain sphere")

    def validate_grid(self) -> None:
        """Smallest feature must span at least one voxel at this grid."""
        half = self.grid / 2.0
        smallest = min(min(self.ventricle_axes_frac), self.hippocampus_radius_frac) * half
        if self.grid < 16 or smallest < 1.0:
            raise ParamError(
                f"grid {self.grid} too small for the configured geometry "
                f"(smallest feature {smallest:.2f} voxels)"
            )


@dataclass(frozen=True)
class SubjectGeometry:
    brain_radius: float
    ventricle_axes: tuple[float, float, float]
    hippocampus_radius: float
    hippocampus_offset: float

    def at_followup(self, months: int, expansion_rate: float, shrink_rate: float) -> "SubjectGeometry":
        shrink = 1.0 - shrink_rate * months
        if shrink <= 0:
            raise ParamError(
                f"shrink rate {shrink_rate}/month collapses blobs at {months} months"
            )
        return SubjectGeometry(
            brain_radius=self.brain_radius,
            ventricle_axes=tuple(a * (1.0 + expansion_rate * months) for a in self.ventricle_axes),
            hippocampus_radius=self.hippocampus_radius * shrink,
            hippocampus_offset=self.hippocampus_offset,
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def render_phantom(grid: int, geom: SubjectGeometry, noise_sigma: float, rng: Rng) -> np.ndarray:
    """Render one phantom volume (float32) with smooth sigmoidal boundaries."""
    coords = np.indices((grid, grid, grid), dtype=np.float64)
    center = (grid - 1) / 2.0
    rel = coords - center

    dist = np.sqrt((rel**2).sum(axis=0))
    brain = _sigmoid((geom.brain_radius - dist) / EDGE_WIDTH_VOX)

    axes = np.asarray(geom.ventricle_axes, dtype=np.float64)
    rho = np.sqrt(((rel / axes[:, None, None, None]) ** 2).sum(axis=0))
    ventricle = _sigmoid((1.0 - rho) * axes.mean() / EDGE_WIDTH_VOX)

    hippo = np.zeros_like(dist)
    for sign in (-1.0, 1.0):
        off = rel.copy()
        off[0] -= sign * geom.hippocampus_offset
        d = np.sqrt((off**2).sum(axis=0))
        hippo = np.maximum(hippo, _sigmoid((geom.hippocampus_radius - d) / EDGE_WIDTH_VOX))

    vol = brain * (TISSUE + (VENTRICLE - TISSUE) * ventricle + (HIPPOCAMPUS - TISSUE) * hippo)
    if noise_sigma > 0:
        vol = vol + rng.normal(0.0, noise_sigma, vol.shape) * (brain > 0.5)
    return vol.astype(np.float32)


def _draw_geometry(spec: PhantomSpec, rng: Rng) -> SubjectGeometry:
    half = spec.grid / 2.0
    j = spec.geometry_jitter
    jb, jv0, jv1, jv2, jh = rng.uniform(-j, j, 5)
    return SubjectGeometry(
        brain_radius=spec.brain_radius_frac * (1.0 + jb) * half,
        ventricle_axes=(
            spec.ventricle_axes_frac[0] * (1.0 + jv0) * half,
            spec.ventricle_axes_frac[1] * (1.0 + jv1) * half,
            spec.ventricle_axes_frac[2] * (1.0 + jv2) * half,
        ),
        hippocampus_radius=spec.hippocampus_radius_frac * (1.0 + jh) * half,
        hippocampus_offset=spec.hippocampus_offset_frac * half,
    )


def _scale_ventricle(geom: SubjectGeometry, factor: float) -> SubjectGeometry:
    return SubjectGeometry(
        brain_radius=geom.brain_radius,
        ventricle_axes=tuple(a * factor for a in geom.ventricle_axes),
        hippocampus_radius=geom.hippocampus_radius,
        hippocampus_offset=geom.hippocampus_offset,
    )


def _generate_subject(args) -> list[tuple[str, str, str, int, int]]:
    """Render and write one subject's baseline + follow-ups; returns pair rows."""
    spec, index, label, master_seed, vol_dir, intervals = args
    sid = f"S{index:04d}"
    srng = Rng(master_seed).spawn(index)
    geom = _draw_geometry(spec, srng)
    if label == 1 and not spec.baseline_matched:
        geom = _scale_ventricle(geom, UNMATCHED_BASELINE_SHIFT)
    bl_path = os.path.join(vol_dir, f"{sid}_bl.vol")
    volume_write(Volume(render_phantom(spec.grid, geom, spec.noise_sigma, srng)), bl_path)
    rows = []
    for months in intervals:
        fu_geom = (
            geom.at_followup(months, spec.converter_expansion_rate, spec.converter_shrink_rate)
            if label == 1
            else geom
        )
        fu_path = os.path.join(vol_dir, f"{sid}_fu{months:02d}.vol")
        volume_write(Volume(render_phantom(spec.grid, fu_geom, spec.noise_sigma, srng)), fu_path)
        rows.append((sid, bl_path, fu_path, months, label))
    return rows


def generate_cohort(
    spec: PhantomSpec,
    n_subjects: int,
    converter_fraction: float,
    intervals,
    rng: Rng,
    out_dir,
    workers: int = 1,
) -> tuple[Cohort, str]:
    """Write a phantom cohort (volumes + manifest + spec echo) to `out_dir`.

    Returns the cohort and the manifest path. Per-subject streams are
    spawned as master seed + subject index, so generation is deterministic
    regardless of `workers` (each worker process owns its own stream).
    """
    if n_subjects < 4:
        raise ParamError(f"need at least 4 subjects, got {n_subjects}")
    if not 0.0 < converter_fraction < 1.0:
        raise ParamError(f"converter_fraction must lie in (0, 1), got {converter_fraction}")
    intervals = tuple(sorted(set(int(m) for m in intervals)))
    if not intervals or any(m not in (6, 12, 24) for m in intervals):
        raise ParamError(f"intervals must be a non-empty subset of {{6, 12, 24}}, got {intervals}")
    spec.validate_grid()

    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    n_conv = round(n_subjects * converter_fraction)
    n_conv = min(max(n_conv, 1), n_subjects - 1)

    tasks = [
        (spec, i, 1 if i < n_conv else 0, rng.seed, vol_dir, intervals)
        for i in range(n_subjects)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(_generate_subject, tasks))
    else:
        per_subject = [_generate_subject(t) for t in tasks]

    pairs = [PairRecord(*row) for rows in per_subject for row in rows]
    cohort = Cohort(tuple(pairs))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    manifest_save(cohort, manifest_path)
    echo = {
        "spec": asdict(spec),
        "n_subjects": n_subjects,
        "converter_fraction": converter_fraction,
        "intervals": list(intervals),
        "seed": rng.seed,
    }
    with open(os.path.join(out_dir, "phantom_spec.json"), "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
    return cohort, manifest_path


def generate_pretrain_set(spec: PhantomSpec, n: int, rng: Rng, out_dir) -> list[tuple[str, int]]:
    """Write `n` labeled single volumes: CN-like (0) vs AD-like (1, scaled ventricle).

    Labels alternate with volume index, so any even n is balanced. Returns
    (path, label) records; n=0 returns an empty list and writes nothing.
    """
    if n < 0:
        raise ParamError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    spec.validate_grid()
    vol_dir = os.path.join(out_dir, "pretrain_volumes")
    os.makedirs(vol_dir, exist_ok=True)
    records = []
    for i in range(n):
        label = i % 2
        srng = rng.spawn(i)
        geom = _draw_geometry(spec, srng)
        if label == 1:
            geom = _scale_ventricle(geom, spec.pretrain_ad_ventricle_scale)
        path = os.path.join(vol_dir, f"P{i:05d}.vol")
        volume_write(Volume(render_phantom(spec.grid, geom, spec.noise_sigma, srng)), path)
        records.append((path, label))
    import csv

    with open(os.path.join(out_dir, "pretrain_index.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label"])
        writer.writerows(records)
    return records


def load_pretrain_index(path) -> list[tuple[str, int]]:
    import csv

    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        return [(row["path"], int(row["label"])) for row in reader]
