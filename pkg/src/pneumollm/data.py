"""Synthetic patient-grouped cohort and the PNDS1 binary dataset format.

PNDS1 layout (all integers little-endian)::

    b"PNDS1"                    format tag
    u32 sample count
    u32 feature width
    u32 metadata length, then that many bytes of UTF-8 JSON
    per sample:
        u16 patient-id length, patient-id UTF-8 bytes
        u8  label (0 or 1)
        width x float64
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PNDS1"


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Sample:
    patient_id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"non-finite features for patient {self.patient_id}")


@dataclass
class Dataset:
    samples: list[Sample]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = self.metadata.get("counts")
        if counts is not None and counts != self.class_counts():
            raise ValueError(f"metadata counts {counts} disagree with samples "
                             f"{self.class_counts()}")

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> dict:
        pos = sum(s.label for s in self.samples)
        return {"0": len(self.samples) - pos, "1": pos}

    @property
    def width(self) -> int:
        return len(self.samples[0].features) if self.samples else 0

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples]) if self.samples \
            else np.zeros((0, 0))

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def patients(self) -> list[str]:
        return [s.patient_id for s in self.samples]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or len(self) != len(other):
            return False
        if self.metadata != other.metadata:
            return False
        return all(a.patient_id == b.patient_id and a.label == b.label
                   and a.features.tobytes() == b.features.tobytes()
                   for a, b in zip(self.samples, other.samples))


def generate_synthetic(n: int = 630, pos_ratio: float = 401 / 630, separation: float = 4.0,
                       patients: int = 210, seed: int = 0, feat_dim: int = 32,
                       noise: float = 0.1) -> Dataset:
    """Two Gaussian classes in a 2-D latent space lifted to ``feat_dim`` features.

    Class means sit at ``(+-separation/2, 0)`` with unit covariance. Each
    patient holds samples of a single class, assigned round-robin.
    """
    if not 0 < pos_ratio < 1:
        raise ValueError(f"pos_ratio must be in (0, 1), got {pos_ratio}")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    if n < 2 or feat_dim < 2:
        raise ValueError(f"need n >= 2 and feat_dim >= 2 (got {n}, {feat_dim})")
    n_pos = int(round(n * pos_ratio))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"pos_ratio {pos_ratio} leaves a class empty at n={n}")
    if not 2 <= patients <= n:
        raise ValueError(f"patients must be in [2, n], got {patients}")
    p_pos = min(max(1, int(round(patients * n_pos / n))), n_pos, patients - 1)
    p_neg = patients - p_pos
    if p_neg > n_neg:
        raise ValueError(f"{p_neg} negative patients but only {n_neg} negative samples")

    rng = np.random.default_rng(seed)
    lift = rng.normal(size=(2, feat_dim)) / np.sqrt(2.0)
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_pos]] = 1
    latent = rng.normal(size=(n, 2))
    latent[:, 0] += np.where(labels == 1, separation / 2, -separation / 2)
    feats = latent @ lift + noise * rng.normal(size=(n, feat_dim))

    # patient numbering is shuffled so ids carry no label information
    ids = rng.permutation(patients)
    pos_ids, neg_ids = ids[:p_pos], ids[p_pos:]
    seen = {0: 0, 1: 0}
    samples = []
    for i in range(n):
        y = int(labels[i])
        pool = pos_ids if y else neg_ids
        pid = f"P{pool[seen[y] % len(pool)]:04d}"
        seen[y] += 1
        samples.append(Sample(pid, feats[i], y))
    meta = {"generator": "gaussian2d", "seed": seed, "separation": float(separation),
            "pos_ratio": float(pos_ratio), "patients": patients, "noise": float(noise),
            "counts": {"0": n_neg, "1": n_pos}}
    return Dataset(samples, meta)


def latent_direction(ds: Dataset) -> np.ndarray:
    """Recover the generator's lift and return the class-axis probe in feature space."""
    rng = np.random.default_rng(ds.metadata["seed"])
    lift = rng.normal(size=(2, ds.width)) / np.sqrt(2.0)
    # least-squares inverse of the lift, first latent coordinate
    return np.linalg.pinv(lift)[:, 0]


def save_dataset(ds: Dataset, path) -> None:
    meta = json.dumps(ds.metadata, sort_keys=True, separators=(",", ":")).encode()
    width = ds.width
    parts = [MAGIC, struct.pack("<III", len(ds), width, len(meta)), meta]
    for s in ds.samples:
        if len(s.features) != width:
            raise ValueError(f"ragged features for patient {s.patient_id}")
        pid = s.patient_id.encode()
        parts.append(struct.pack("<H", len(pid)) + pid + struct.pack("<B", s.label))
        parts.append(np.asarray(s.features, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def decode_dataset(buf: bytes) -> Dataset:
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(buf):
            raise TruncatedFileError(f"dataset truncated at byte {pos}: needed {k} more, "
                                     f"{len(buf) - pos} left")
        out = buf[pos:pos + k]
        pos += k
        return out

    tag = buf[:5]
    if tag[:4] != b"PNDS":
        raise BadMagicError(f"not a PNDS file (tag {tag!r})")
    if tag != MAGIC:
        raise UnsupportedVersionError(f"unsupported dataset format {tag!r}, expected {MAGIC!r}")
    take(5)
    count, width, mlen = struct.unpack("<III", take(12))
    metadata = json.loads(take(mlen).decode())
    samples = []
    for _ in range(count):
        (plen,) = struct.unpack("<H", take(2))
        pid = take(plen).decode()
        (label,) = struct.unpack("<B", take(1))
        feats = np.frombuffer(take(8 * width), dtype="<f8").astype(np.float64)
        samples.append(Sample(pid, feats, label))
    if pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - pos} trailing bytes after {count} samples")
    return Dataset(samples, metadata)


def export_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "label"] + [f"f{i}" for i in range(ds.width)])
        for s in ds.samples:
            w.writerow([s.patient_id, s.label] + [repr(float(v)) for v in s.features])
