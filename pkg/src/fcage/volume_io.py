"""Bit-exact binary tensor storage and cohort manifests.

All pipeline stages persist dense float arrays in a tiny custom format
("BVOL"): a 6-byte magic, a little-endian uint32 rank, the extents
(slowest-varying first), then the data as little-endian float32 in
row-major order.  Cohort manifests are plain CSV with a mandatory
header line.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BVOL1\x00"
MAX_NDIM = 5
MAX_ELEMENTS = 2**31

MANIFEST_HEADER = ["subject_id", "age_years", "volume_path"]


class ReadError(ValueError):
    """Malformed or unreadable input file."""


class BadMagicError(ReadError):
    """File does not start with the BVOL magic bytes."""


class TruncatedFileError(ReadError):
    """File ends before the header-declared data."""


class ExtentOverflowError(ReadError):
    """Header extents multiply past the element limit."""


class WriteError(ValueError):
    """Tensor cannot be represented in the BVOL format."""


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age_years: float
    volume_path: str


@dataclass
class CohortManifest:
    records: list[SubjectRecord] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age_years for r in self.records], dtype=np.float64)


def _check_shape(shape: tuple[int, ...]) -> None:
    if not 1 <= len(shape) <= MAX_NDIM:
        raise WriteError(f"tensor rank {len(shape)} outside 1..{MAX_NDIM}")
    if any(d < 1 for d in shape):
        raise WriteError(f"tensor extents must be >= 1, got {shape}")
    n = 1
    for d in shape:
        n *= d
    if n > MAX_ELEMENTS:
        raise WriteError(f"tensor has {n} elements, limit is {MAX_ELEMENTS}")


def write_bvol(path, tensor: np.ndarray) -> None:
    """Write *tensor* to *path* as little-endian float32, row-major.

    Round-trips bit-exactly through :func:`read_bvol` for float32 input.
    """
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    _check_shape(arr.shape)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_bvol(path) -> np.ndarray:
    """Read a BVOL file back into a float32 array.

    Bad magic, truncation, extent overflow, and NaN payloads are each
    reported as distinct errors.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a BVOL file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise TruncatedFileError(f"{path}: truncated before rank field")
    (ndim,) = struct.unpack_from("<I", raw, off)
    off += 4
    if not 1 <= ndim <= MAX_NDIM:
        raise ReadError(f"{path}: rank {ndim} outside 1..{MAX_NDIM}")
    if len(raw) < off + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated inside extents")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    if any(d < 1 for d in shape):
        raise ReadError(f"{path}: zero extent in shape {shape}")
    n = 1
    for d in shape:
        n *= d
        if n > MAX_ELEMENTS:
            raise ExtentOverflowError(f"{path}: extent product exceeds {MAX_ELEMENTS}")
    if len(raw) - off < 4 * n:
        raise TruncatedFileError(
            f"{path}: expected {n} floats, file holds {(len(raw) - off) // 4}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
    if np.isnan(data).any():
        raise ReadError(f"{path}: NaN payloads are not allowed")
    return data.reshape(shape).copy()


def write_manifest(path, manifest: CohortManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in manifest.records:
            writer.writerow([rec.subject_id, repr(rec.age_years), rec.volume_path])


def read_manifest(path, seed: int = 0) -> CohortManifest:
    """Parse a manifest CSV; validates id uniqueness and age range."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReadError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ReadError(
                f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}"
            )
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ReadError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            sid, age_text, vol = row[0].strip(), row[1].strip(), row[2].strip()
            if not sid:
                raise ReadError(f"{path}:{lineno}: empty subject_id")
            if sid in seen:
                raise ReadError(f"{path}:{lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            try:
                age = float(age_text)
            except ValueError:
                raise ReadError(f"{path}:{lineno}: bad age {age_text!r}") from None
            if not 0.0 < age < 130.0:
                raise ReadError(f"{path}:{lineno}: age {age} outside (0, 130)")
            records.append(SubjectRecord(sid, age, vol))
    return CohortManifest(records=records, seed=seed)
