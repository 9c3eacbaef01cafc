import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from medivista import mvst


def test_header_layout():
    buf = mvst.encode(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"MVST"
    assert buf[4:7] == bytes([1, 1, 2])
    assert struct.unpack_from("<2I", buf, 7) == (2, 3)
    assert len(buf) == 7 + 8 + 6 * 4


@given(arrays(st.sampled_from([np.float64, np.float32, np.uint8]), array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_roundtrip_bit_identical(a):
    b = mvst.decode(mvst.encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_file_roundtrip(tmp_path, rng):
    a = rng.normal(size=(1, 4, 8, 8))
    mvst.save(tmp_path / "x.mvst", a)
    np.testing.assert_array_equal(mvst.load(tmp_path / "x.mvst"), a)


@pytest.mark.parametrize("buf", [b"", b"XXXX\x01\x00\x00", b"MVST\x02\x00\x00", b"MVST\x01\x09\x00"])
def test_malformed_headers_rejected(buf):
    with pytest.raises(mvst.MVSTError):
        mvst.decode(buf)


def test_truncated_payload_rejected():
    buf = mvst.encode(np.arange(6.0))
    with pytest.raises(mvst.MVSTError, match="payload"):
        mvst.decode(buf[:-1])


def test_unsupported_dtype():
    with pytest.raises(mvst.MVSTError, match="dtype"):
        mvst.encode(np.zeros(3, dtype=np.int32))
