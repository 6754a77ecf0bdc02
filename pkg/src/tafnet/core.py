"""Domain data model: volumes, longitudinal pair records, cohorts, seeded RNG.

Also owns the two on-disk interchange formats: the TAFVOL01 binary volume
format and the cohort manifest CSV, plus the run-metadata text file.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    FormatError,
    IoError,
    ParamError,
    SchemaError,
    ShapeError,
)

VALID_INTERVALS = (6, 12, 24)

_MAGIC = b"TAFVOL01"
_VERSION = 1


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid with voxel spacing.

    `data` is always float32 (the payload type of the TAFVOL01 format);
    `intensity_range_tag` is "unit" once values are normalized to [0, 1].
    Instances are immutable and safe to share across threads.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range_tag: str = "raw"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"volume must be 3D with positive dims, got {arr.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        if not np.isfinite(arr).all():
            raise DataError("volume contains NaN/Inf values")
        if self.intensity_range_tag not in ("raw", "unit"):
            raise DataError(f"unknown intensity tag {self.intensity_range_tag!r}")
        if self.intensity_range_tag == "unit":
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise DataError("unit-tagged volume has values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def volume_write(v: Volume, path) -> None:
    """Write a volume in TAFVOL01 format (little-endian, bit-exact float32).

    Layout: 8-byte magic "TAFVOL01", u32 version, u32 reserved, 3x u32 shape,
    3x f32 spacing, then the row-major float32 payload.
    """
    d, h, w = v.shape
    header = _MAGIC + struct.pack(
        "<IIIIIfff", _VERSION, 0, d, h, w, *v.spacing
    )
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def volume_read(path) -> Volume:
    """Read a TAFVOL01 volume; inverse of :func:`volume_write`."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read volume file {path}: {e}") from e
    if len(raw) < 40:
        raise FormatError(f"{path}: file shorter than the 40-byte header")
    if raw[:8] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {_MAGIC!r}")
    version, _reserved, d, h, w, sd, sh, sw = struct.unpack("<IIIIIfff", raw[8:40])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = d * h * w
    if len(raw) != 40 + 4 * n:
        raise FormatError(
            f"{path}: payload truncated (expected {40 + 4 * n} bytes, got {len(raw)})"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=40).reshape(d, h, w)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: payload contains NaN/Inf")
    return Volume(data=data, spacing=(sd, sh, sw))


@dataclass(frozen=True)
class PairRecord:
    """One longitudinal sample: baseline/follow-up volume refs plus label."""

    subject_id: str
    baseline_ref: str
    followup_ref: str
    interval_months: int
    label: int

    def __post_init__(self):
        if not self.subject_id:
            raise SchemaError("subject_id must be non-empty")
        if self.baseline_ref == self.followup_ref:
            raise SchemaError(
                f"{self.subject_id}: baseline_ref equals followup_ref"
            )
        if self.interval_months not in VALID_INTERVALS:
            raise SchemaError(
                f"{self.subject_id}: interval_months={self.interval_months} "
                f"not in {VALID_INTERVALS}"
            )
        if self.label not in (0, 1):
            raise SchemaError(f"{self.subject_id}: label={self.label} not in {{0, 1}}")


@dataclass(frozen=True)
class Cohort:
    """Validated set of longitudinal pairs with per-class tallies."""

    pairs: tuple[PairRecord, ...]
    subjects: frozenset[str] = field(init=False)
    class_counts: dict = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        seen = set()
        for p in self.pairs:
            key = (p.subject_id, p.baseline_ref, p.followup_ref)
            if key in seen:
                raise SchemaError(f"duplicate pair row {key}")
            seen.add(key)
        object.__setattr__(
            self, "subjects", frozenset(p.subject_id for p in self.pairs)
        )
        counts = {0: 0, 1: 0}
        for p in self.pairs:
            counts[p.label] += 1
        object.__setattr__(self, "class_counts", counts)

    def __len__(self) -> int:
        return len(self.pairs)

    def subject_labels(self) -> dict[str, int]:
        """Map subject -> label; raises if a subject's pairs disagree."""
        labels: dict[str, int] = {}
        for p in self.pairs:
            prev = labels.setdefault(p.subject_id, p.label)
            if prev != p.label:
                raise SchemaError(
                    f"{p.subject_id}: inconsistent labels across pairs"
                )
        return labels

    def subset(self, subjects) -> "Cohort":
        keep = set(subjects)
        return Cohort(tuple(p for p in self.pairs if p.subject_id in keep))


MANIFEST_COLUMNS = ("subject_id", "baseline", "followup", "interval_months", "label")


def manifest_load(path) -> Cohort:
    """Load a cohort manifest CSV with the fixed five-column header."""
    try:
        f = open(path, "r", newline="")
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e
    with f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise SchemaError(
                f"manifest header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        pairs = []
        for i, row in enumerate(reader, start=2):
            try:
                interval = int(row["interval_months"])
                label = int(row["label"])
            except (TypeError, ValueError) as e:
                raise SchemaError(f"{path}:{i}: non-integer interval/label") from e
            pairs.append(
                PairRecord(
                    subject_id=row["subject_id"],
                    baseline_ref=row["baseline"],
                    followup_ref=row["followup"],
                    interval_months=interval,
                    label=label,
                )
            )
    return Cohort(tuple(pairs))


def manifest_save(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for p in cohort.pairs:
            writer.writerow(
                [p.subject_id, p.baseline_ref, p.followup_ref, p.interval_months, p.label]
            )


class Rng:
    """Seeded random stream (PCG64). Same seed => identical draw sequence.

    Instances are single-owner: never share one across threads/workers.
    Use :meth:`spawn` to derive independent per-worker streams.
    """

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ParamError(f"seed must be a 64-bit unsigned int, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def spawn(self, offset: int) -> "Rng":
        """Derive a stream for worker/subject `offset` (seed + offset mod 2^64)."""
        return Rng((self.seed + int(offset)) % 2**64)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state) -> None:
        self._gen.bit_generator.state = state


def config_hash(items: dict) -> str:
    """Stable sha256 over sorted key=value lines of a flat config."""
    canon = "".join(f"{k}={items[k]}\n" for k in sorted(items))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_run_metadata(path, seed: int, cfg_hash: str, extra: dict | None = None) -> None:
    """Run-metadata text file: seed, config hash, rng algorithm, versions."""
    import scipy

    from . import __version__

    lines = {
        "seed": seed,
        "config_hash": cfg_hash,
        "rng_algorithm": Rng.ALGORITHM,
        "tafnet_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
    }
    if extra:
        lines.update(extra)
    with open(path, "w") as f:
        for k, v in lines.items():
            f.write(f"{k}={v}\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
