import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from keyprop import archive
from keyprop.archive import ArchiveError


class TestArchive:
    def test_round_trip_bit_exact(self, rng):
        entries = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": rng.standard_normal(5), "s": np.array(2.5)}
        out = archive.loads(archive.dumps(entries))
        for k, v in entries.items():
            assert out[k].dtype == v.dtype and out[k].tobytes() == v.tobytes()

    def test_header_layout(self):
        blob = archive.dumps({"x": np.zeros((2,), np.float32)})
        assert blob[:4] == b"KPT1"
        assert blob[4:8] == (1).to_bytes(4, "little")
        assert blob[8:10] == (1).to_bytes(2, "little") and blob[10:11] == b"x"

    def test_bad_magic(self):
        with pytest.raises(ArchiveError):
            archive.loads(b"NOPE" + bytes(8))

    @pytest.mark.parametrize("cut", [3, 9, 20, -1])
    def test_truncation(self, cut):
        blob = archive.dumps({"x": np.arange(6.0).reshape(2, 3)})
        with pytest.raises(ArchiveError):
            archive.loads(blob[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ArchiveError):
            archive.loads(archive.dumps({"x": np.ones(2)}) + b"\0")

    def test_unsupported_dtype(self):
        with pytest.raises(ArchiveError):
            archive.dumps({"x": np.ones(2, dtype=np.int32)})

    def test_failed_write_keeps_old_file(self, tmp_path):
        path = tmp_path / "a.kpt"
        archive.save(path, {"x": np.ones(2)})
        with pytest.raises(ArchiveError):
            archive.save(path, {"x": np.ones(2, dtype=np.int64)})
        np.testing.assert_array_equal(archive.load(path)["x"], np.ones(2))

    @given(
        st.dictionaries(
            st.text(min_size=1, max_size=12),
            arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=4)),
            max_size=5,
        )
    )
    def test_round_trip_property(self, entries):
        out = archive.loads(archive.dumps(entries))
        assert set(out) == set(entries)
        for k, v in entries.items():
            assert out[k].shape == v.shape and out[k].tobytes() == v.tobytes()
