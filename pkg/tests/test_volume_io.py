import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcage import volume_io
from fcage.volume_io import (
    BadMagicError,
    CohortManifest,
    ExtentOverflowError,
    ReadError,
    SubjectRecord,
    TruncatedFileError,
    WriteError,
    read_bvol,
    read_manifest,
    write_bvol,
    write_manifest,
)


def test_file_size_arithmetic(tmp_path):
    # magic(6) + ndim(4) + ndim*4 dims + 4 bytes per float
    p = tmp_path / "a.bvol"
    write_bvol(p, np.zeros((1, 1), dtype=np.float32))
    assert p.stat().st_size == 6 + 4 + 2 * 4 + 1 * 4  # == 22
    write_bvol(p, np.zeros((1,), dtype=np.float32))
    assert p.stat().st_size == 6 + 4 + 1 * 4 + 1 * 4  # == 18
    write_bvol(p, np.zeros((2, 3, 4), dtype=np.float32))
    assert p.stat().st_size == 6 + 4 + 3 * 4 + 24 * 4


def test_round_trip_distinct_values(tmp_path):
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    p = tmp_path / "t.bvol"
    write_bvol(p, t)
    back = read_bvol(p)
    assert back.shape == (2, 3, 4)
    assert back.dtype == np.float32
    assert np.array_equal(back, t)


def test_ieee754_payload_reads_as_one(tmp_path):
    p = tmp_path / "one.bvol"
    header = volume_io.MAGIC + struct.pack("<I", 1) + struct.pack("<I", 1)
    with open(p, "wb") as fh:
        fh.write(header + struct.pack("<I", 0x3F800000))
    assert read_bvol(p)[0] == 1.0


def test_endianness_is_fixed(tmp_path):
    # 1.0 must land on disk as the little-endian payload 00 00 80 3F
    p = tmp_path / "le.bvol"
    write_bvol(p, np.array([1.0], dtype=np.float32))
    data = p.read_bytes()
    assert data[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])


@settings(max_examples=50, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=5),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(tmp_path_factory, shape, seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(shape).astype(np.float32)
    p = tmp_path_factory.mktemp("bvol") / "x.bvol"
    write_bvol(p, t)
    back = read_bvol(p)
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.bvol"
    with open(p, "wb") as fh:
        fh.write(b"XVOL1\x00" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"\0" * 4)
    with pytest.raises(BadMagicError):
        read_bvol(p)


def test_truncated_data(tmp_path):
    p = tmp_path / "x.bvol"
    with open(p, "wb") as fh:
        fh.write(volume_io.MAGIC + struct.pack("<I", 2) + struct.pack("<2I", 2, 2))
        fh.write(struct.pack("<3f", 1.0, 2.0, 3.0))  # declares 4, holds 3
    with pytest.raises(TruncatedFileError):
        read_bvol(p)


def test_extent_overflow(tmp_path):
    p = tmp_path / "x.bvol"
    with open(p, "wb") as fh:
        fh.write(volume_io.MAGIC + struct.pack("<I", 3))
        fh.write(struct.pack("<3I", 2**11, 2**11, 2**11))
    with pytest.raises(ExtentOverflowError):
        read_bvol(p)


def test_nan_payload_rejected(tmp_path):
    p = tmp_path / "x.bvol"
    with open(p, "wb") as fh:
        fh.write(volume_io.MAGIC + struct.pack("<I", 1) + struct.pack("<I", 1))
        fh.write(struct.pack("<f", float("nan")))
    with pytest.raises(ReadError, match="NaN"):
        read_bvol(p)


def test_write_rejects_bad_shapes(tmp_path):
    p = tmp_path / "x.bvol"
    with pytest.raises(WriteError):
        write_bvol(p, np.zeros((1,) * 6, dtype=np.float32))
    with pytest.raises(WriteError):
        write_bvol(p, np.zeros(0, dtype=np.float32))


def test_manifest_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("subject_id,age_years,volume_path\ns1,12.5,s1.bvol\n")
    m = read_manifest(p)
    assert len(m) == 1
    assert m.records[0] == SubjectRecord("s1", 12.5, "s1.bvol")


def test_manifest_round_trip(tmp_path):
    m = CohortManifest(
        records=[SubjectRecord("a", 8.25, "a.bvol"), SubjectRecord("b", 21.5, "b.bvol")],
        seed=7,
    )
    p = tmp_path / "m.csv"
    write_manifest(p, m)
    back = read_manifest(p, seed=7)
    assert back.records == m.records
    assert back.seed == 7


def test_manifest_duplicate_id(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("subject_id,age_years,volume_path\ns1,12.5,a\ns1,13.0,b\n")
    with pytest.raises(ReadError, match="duplicate"):
        read_manifest(p)


def test_manifest_age_range(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("subject_id,age_years,volume_path\ns1,-3,a\n")
    with pytest.raises(ReadError, match="age"):
        read_manifest(p)


def test_manifest_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("subject_id,age_years\ns1,12.5\n")
    with pytest.raises(ReadError, match="header"):
        read_manifest(p)
