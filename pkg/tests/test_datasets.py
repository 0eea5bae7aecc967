import gzip
import struct

import numpy as np
import pytest

from kprnn.datasets import (DatasetParseError, load_csv_sequences, load_dataset, load_idx,
                            parse_idx, write_csv_sequences, write_idx)
from kprnn.train import make_separable_sequences


def idx_bytes(array: np.ndarray, code=0x08) -> bytes:
    # hand-rolled encoder, independent of write_idx
    header = b"\x00\x00" + bytes([code, array.ndim]) + b"".join(struct.pack(">I", d) for d in array.shape)
    return header + array.astype(">u1" if code == 0x08 else ">f4").tobytes()


class TestIdx:
    def test_u8_images(self, rng):
        imgs = rng.integers(0, 256, (3, 4, 5), dtype=np.uint8)
        data = idx_bytes(imgs)
        assert data[:4] == bytes.fromhex("00000803")
        np.testing.assert_array_equal(parse_idx(data), imgs)

    def test_float_payload(self, rng):
        a = rng.standard_normal((2, 3)).astype(np.float32)
        np.testing.assert_array_equal(parse_idx(idx_bytes(a, 0x0D)), a)

    def test_usps_like_sequence_shape(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (7, 16, 16), dtype=np.uint8)
        labels = rng.integers(0, 10, 7, dtype=np.uint8)
        (tmp_path / "x.idx").write_bytes(idx_bytes(imgs))
        (tmp_path / "y.idx").write_bytes(idx_bytes(labels))
        ds = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
        assert ds.xs.shape == (7, 16, 16)
        np.testing.assert_allclose(ds.xs, imgs / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_truncated_offset(self, rng):
        data = idx_bytes(rng.integers(0, 256, (2, 3, 3), dtype=np.uint8))
        with pytest.raises(DatasetParseError) as info:
            parse_idx(data[:-5])
        assert info.value.offset == len(data) - 5
        with pytest.raises(DatasetParseError) as info:
            parse_idx(data[:9])
        assert info.value.offset == 9

    @pytest.mark.parametrize("data,offset", [
        (b"\x01\x00\x08\x01\x00\x00\x00\x00", 0),
        (b"\x00\x00\x07\x01\x00\x00\x00\x00", 2),
        (b"\x00\x00\x08\x00", 3),
        (b"\x00\x00", 2),
    ])
    def test_bad_header(self, data, offset):
        with pytest.raises(DatasetParseError) as info:
            parse_idx(data)
        assert info.value.offset == offset and "offset" in str(info.value)

    def test_trailing_bytes(self):
        with pytest.raises(DatasetParseError, match="trailing"):
            parse_idx(idx_bytes(np.zeros(3, np.uint8)) + b"\x00")

    def test_file_error_keeps_offset_and_path(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(b"\x00\x00\x08\x03\x00\x00")
        with pytest.raises(DatasetParseError) as info:
            load_idx(p, p)
        assert info.value.offset == 6 and "bad.idx" in str(info.value)

    def test_write_roundtrip_and_gzip(self, tmp_path, rng):
        a = rng.integers(0, 256, (4, 2, 2), dtype=np.uint8)
        write_idx(tmp_path / "a.idx", a)
        assert (tmp_path / "a.idx").read_bytes() == idx_bytes(a)
        (tmp_path / "a.idx.gz").write_bytes(gzip.compress(idx_bytes(a)))
        write_idx(tmp_path / "l.idx", np.arange(4, dtype=np.uint8))
        ds = load_idx(tmp_path / "a.idx.gz", tmp_path / "l.idx")
        assert ds.xs.shape == (4, 2, 2)

    def test_label_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "x.idx", np.zeros((3, 2, 2), np.uint8))
        write_idx(tmp_path / "y.idx", np.zeros(2, np.uint8))
        with pytest.raises(DatasetParseError):
            load_idx(tmp_path / "x.idx", tmp_path / "y.idx")


class TestCsv:
    def test_roundtrip(self, tmp_path):
        ds = make_separable_sequences(10, 4, 3, 3, seed=2)
        write_csv_sequences(tmp_path / "d.csv", ds)
        back = load_csv_sequences(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.xs, ds.xs)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_step_ordering_and_custom_columns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,t,y,a,b\n"
                     "s1,1,0,3,4\n"
                     "s1,0,0,1,2\n"
                     "s2,0,1,5,6\n"
                     "s2,1,1,7,8\n")
        ds = load_csv_sequences(p, label_column="y", sequence_column="id", step_column="t")
        np.testing.assert_array_equal(ds.xs[0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(ds.labels, [0, 1])

    @pytest.mark.parametrize("text,match", [
        ("", "empty"),
        ("a,b\n1,2\n", "header"),
        ("sequence_id,label,f\ns,0\n", "fields"),
        ("sequence_id,label,f\ns,0,x\n", "line 2"),
        ("sequence_id,label,f\ns,0,1\ns,1,2\n", "several labels"),
        ("sequence_id,label,f\ns,0,1\ns,0,2\nt,1,3\n", "unequal"),
    ])
    def test_errors(self, tmp_path, text, match):
        p = tmp_path / "d.csv"
        p.write_text(text)
        with pytest.raises(DatasetParseError, match=match):
            load_csv_sequences(p)

    def test_header_only_is_empty(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("sequence_id,label,f\n")
        assert len(load_csv_sequences(p)) == 0

    def test_load_dataset_dispatch(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x", format="parquet")
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x", format="idx")
