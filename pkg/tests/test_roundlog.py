"""Packed ternary log: codec, streaming, size law, compression."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtrain import roundlog as rl


class TestPack5:
    def test_all_zero(self):
        assert rl.pack5([0, 0, 0, 0, 0]) == 0

    def test_all_ignore(self):
        assert rl.pack5([1, 1, 1, 1, 1]) == 121

    def test_mixed(self):
        assert rl.pack5([2, 0, 0, 0, 1]) == 83

    def test_max(self):
        assert rl.pack5([2, 2, 2, 2, 2]) == 242

    def test_bad_digit(self):
        with pytest.raises(ValueError):
            rl.pack5([0, 0, 3, 0, 0])

    def test_bad_length(self):
        with pytest.raises(ValueError):
            rl.pack5([0, 1])

    def test_unpack_examples(self):
        assert rl.unpack5(0) == [0, 0, 0, 0, 0]
        assert rl.unpack5(121) == [1, 1, 1, 1, 1]

    def test_unpack_out_of_range(self):
        with pytest.raises(rl.LogFormatError, match="corrupt log byte"):
            rl.unpack5(243)

    @given(st.lists(st.sampled_from((0, 1, 2)), min_size=5, max_size=5))
    def test_bijection(self, digits):
        assert rl.unpack5(rl.pack5(digits)) == digits


class TestWriterReader:
    def test_five_entries_single_byte(self, tmp_path):
        path = tmp_path / "a.vtrl"
        with rl.LogWriter(path, 32) as w:
            for _ in range(5):
                w.write(1)
        raw = path.read_bytes()
        assert raw[: rl.HEADER_LEN][:4] == b"VTRL"
        assert raw[rl.HEADER_LEN :] == bytes([121])
        reader = rl.LogReader(path)
        assert reader.entry_count == 5

    def test_padding_with_ignore(self, tmp_path):
        path = tmp_path / "b.vtrl"
        with rl.LogWriter(path, 32) as w:
            for d in (0, 0, 0, 0, 0, 2):
                w.write(d)
        payload = path.read_bytes()[rl.HEADER_LEN :]
        # 2 followed by four pad-1s: 2 + 3 + 9 + 27 + 81
        assert list(payload) == [0, 122]
        reader = rl.LogReader(path)
        assert reader.entry_count == 6
        assert [reader.read() for _ in range(6)] == [0, 0, 0, 0, 0, 2]

    def test_empty_log(self, tmp_path):
        path = tmp_path / "c.vtrl"
        rl.LogWriter(path, 26).close()
        reader = rl.LogReader(path)
        assert reader.entry_count == 0
        assert path.stat().st_size == rl.HEADER_LEN

    def test_exhaustion(self, tmp_path):
        path = tmp_path / "d.vtrl"
        with rl.LogWriter(path, 32) as w:
            w.write(2)
        reader = rl.LogReader(path)
        assert reader.read() == 2
        with pytest.raises(rl.LogExhaustedError, match="log exhausted"):
            reader.read()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(rl.LogFormatError, match="not a rounding log"):
            rl.LogReader(path)

    def test_write_array_matches_scalar_writes(self, tmp_path):
        rng = np.random.default_rng(0)
        digits = rng.integers(0, 3, size=2003).astype(np.uint8)
        p1, p2 = tmp_path / "s.vtrl", tmp_path / "v.vtrl"
        with rl.LogWriter(p1, 32) as w:
            for d in digits:
                w.write(int(d))
        with rl.LogWriter(p2, 32) as w:
            w.write_array(digits[:7])
            w.write_array(digits[7:1500])
            w.write_array(digits[1500:])
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_various_lengths(self, tmp_path):
        rng = np.random.default_rng(1)
        for n in (0, 1, 4, 5, 6, 99, 1000, 12345):
            digits = rng.integers(0, 3, size=n).astype(np.uint8)
            path = tmp_path / f"r{n}.vtrl"
            with rl.LogWriter(path, 29) as w:
                w.write_array(digits)
            back = rl.LogReader(path).read_array(n)
            assert np.array_equal(back, digits)

    def test_size_law(self, tmp_path):
        for n in (5, 100, 100000):
            path = tmp_path / f"z{n}.vtrl"
            with rl.LogWriter(path, 32) as w:
                w.write_array(np.ones(n, dtype=np.uint8))
            assert path.stat().st_size == rl.HEADER_LEN + (n + 4) // 5
            assert rl.file_bytes_for(n) == path.stat().st_size

    def test_deflate_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        digits = rng.integers(0, 3, size=50000).astype(np.uint8)
        path = tmp_path / "defl.vtrl"
        with rl.LogWriter(path, 32, compress=True) as w:
            w.write_array(digits)
        reader = rl.LogReader(path)
        assert reader.flags & rl.FLAG_DEFLATE
        assert np.array_equal(reader.read_array(50000), digits)

    def test_corrupt_byte_detected(self, tmp_path):
        path = tmp_path / "corrupt.vtrl"
        with rl.LogWriter(path, 32) as w:
            w.write_array(np.zeros(10, dtype=np.uint8))
        raw = bytearray(path.read_bytes())
        raw[rl.HEADER_LEN] = 250
        path.write_bytes(bytes(raw))
        with pytest.raises(rl.LogFormatError, match="corrupt log byte"):
            rl.LogReader(path)

    def test_histogram(self, tmp_path):
        path = tmp_path / "h.vtrl"
        digits = np.array([0, 0, 1, 2, 2, 2, 1], dtype=np.uint8)
        with rl.LogWriter(path, 32) as w:
            w.write_array(digits)
        hist = rl.LogReader(path).histogram()
        assert hist == {0: 2, 1: 2, 2: 3}
        assert sum(hist.values()) == 7


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from((0, 1, 2)), min_size=0, max_size=400))
def test_roundtrip_property(tmp_path_factory, digits):
    path = tmp_path_factory.mktemp("rt") / "p.vtrl"
    with rl.LogWriter(path, 32) as w:
        for d in digits:
            w.write(d)
    reader = rl.LogReader(path)
    assert [reader.read() for _ in range(len(digits))] == digits
    assert reader.remaining == 0


def test_compressibility_monotonic(tmp_path):
    """Ignore-heavy logs never DEFLATE larger than uniform ones."""
    n = 50000
    for seed in range(10):
        rng = np.random.default_rng(seed)
        uniform = rng.integers(0, 3, size=n).astype(np.uint8)
        skewed = np.where(rng.random(n) < 0.9, 1, rng.integers(0, 3, size=n)).astype(np.uint8)
        packed_u = rl._pack_block(uniform)
        packed_s = rl._pack_block(skewed)
        assert len(zlib.compress(packed_s)) <= len(zlib.compress(packed_u))


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "v9.vtrl"
    with rl.LogWriter(path, 32) as w:
        w.write(1)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(rl.LogFormatError, match="version"):
        rl.LogReader(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.vtrl"
    with rl.LogWriter(path, 32) as w:
        w.write_array(np.ones(100, dtype=np.uint8))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(rl.LogFormatError, match="truncated"):
        rl.LogReader(path)
