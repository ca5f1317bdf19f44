import json
import os
import stat
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from qdk.errors import FormatError
from qdk.modelfile import MAGIC, ModelFile, atomic_write

names = st.text(min_size=1, max_size=12)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=True, allow_infinity=True))


def bits(a):
    return np.asarray(a, dtype="<f8").tobytes()


@given(st.dictionaries(names, arrays, max_size=5),
       st.dictionaries(st.text(max_size=6), st.one_of(st.integers(), st.floats(allow_nan=False), st.text()),
                       max_size=4))
def test_round_trip_bit_exact(tensors, sidecar):
    mf = ModelFile(tensors, sidecar)
    data = mf.to_bytes()
    back = ModelFile.from_bytes(data)
    assert list(back.tensors) == list(tensors)
    for k, v in tensors.items():
        assert back.tensors[k].shape == v.shape
        assert bits(back.tensors[k]) == bits(v)          # NaN payloads and -0.0 survive
    assert back.sidecar == sidecar
    assert back.to_bytes() == data


def test_layout():
    data = ModelFile({"w": np.array([[1.0, 2.0]])}, {}).to_bytes()
    assert data[:4] == MAGIC
    version, count = struct.unpack_from("<HI", data, 4)
    assert (version, count) == (1, 1)
    (n,) = struct.unpack_from("<H", data, 10)
    assert data[12:12 + n] == b"w"
    dtype, rank = struct.unpack_from("<BB", data, 13)
    assert (dtype, rank) == (1, 2)
    assert struct.unpack_from("<2Q", data, 15) == (1, 2)
    assert struct.unpack_from("<2d", data, 31) == (1.0, 2.0)
    (side,) = struct.unpack_from("<Q", data, 47)
    assert json.loads(data[55:55 + side]) == {}
    assert len(data) == 55 + side


def test_special_values():
    t = np.array([-0.0, np.nan, np.inf, -np.inf, 5e-324])
    back = ModelFile.from_bytes(ModelFile({"t": t}).to_bytes()).tensors["t"]
    assert bits(back) == bits(t)
    assert np.signbit(back[0])


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<H", 9) + d[6:], "version"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d + b"\0", "trailing"),
    (lambda d: d[:13] + b"\x07" + d[14:], "dtype"),
    (lambda d: d[:10], "truncated"),
])
def test_corruption(mutate, msg):
    data = ModelFile({"w": np.ones((2, 2))}, {"a": 1}).to_bytes()
    with pytest.raises(FormatError, match=msg):
        ModelFile.from_bytes(mutate(data))


def test_duplicate_names():
    one = ModelFile({"w": np.ones(1)}).to_bytes()
    body = one[10:-8 - 2]
    data = MAGIC + struct.pack("<HI", 1, 2) + body + body + struct.pack("<Q", 2) + b"{}"
    with pytest.raises(FormatError, match="duplicate"):
        ModelFile.from_bytes(data)


def test_bad_json():
    data = ModelFile({}, {}).to_bytes()[:-2] + b"{]"
    with pytest.raises(FormatError, match="sidecar"):
        ModelFile.from_bytes(data)


def test_save_load(tmp_path):
    mf = ModelFile({"a": np.arange(6.0).reshape(2, 3)}, {"k": [1, 2]})
    mf.save(tmp_path / "sub" / "m.qrtd")
    back = ModelFile.load(tmp_path / "sub" / "m.qrtd")
    assert np.array_equal(back.tensors["a"], mf.tensors["a"]) and back.sidecar == {"k": [1, 2]}


class TestAtomicWrite:
    def test_replaces_and_keeps_no_temp(self, tmp_path):
        p = tmp_path / "out.csv"
        p.write_text("old")
        atomic_write(p, "new")
        assert p.read_text() == "new"
        assert os.listdir(tmp_path) == ["out.csv"]

    def test_permissions_follow_umask(self, tmp_path):
        old = os.umask(0o022)
        try:
            atomic_write(tmp_path / "f", b"x")
        finally:
            os.umask(old)
        assert stat.S_IMODE(os.stat(tmp_path / "f").st_mode) == 0o644

    def test_failure_leaves_old_file(self, tmp_path, monkeypatch):
        p = tmp_path / "out.csv"
        p.write_text("old")

        def boom(*a):
            raise OSError("disk full")
        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            atomic_write(p, "new")
        assert p.read_text() == "old"
        assert os.listdir(tmp_path) == ["out.csv"]
