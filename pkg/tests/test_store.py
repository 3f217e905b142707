import os

import numpy as np
import pytest

from spp import StoreFormatError, TensorStore, store_read, store_write


def roundtrip(store, tmp_path):
    path = tmp_path / "t.sppt"
    store_write(store, path)
    return path, store_read(path)


def test_roundtrip_preserves_order_dtypes_and_bytes(tmp_path):
    store = TensorStore()
    store.add("w1", np.arange(6, dtype=np.float64).reshape(2, 3))
    store.add("w1.mask", np.array([[1, 0, 1], [0, 1, 1]], dtype=np.uint8))
    store.add("small", np.array([1.5, -2.5], dtype=np.float32))
    store.add("cube", np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    path, back = roundtrip(store, tmp_path)
    assert back.names() == ["w1", "w1.mask", "small", "cube"]
    for name, arr in store.items():
        other = back.get(name)
        assert other.dtype == arr.dtype
        assert other.shape == arr.shape
        assert np.array_equal(other, arr)


def test_write_is_deterministic(tmp_path):
    def build():
        s = TensorStore()
        s.add("a", np.ones((2, 2)))
        s.set_meta({"pattern": "2:4", "ratio": 0.5})
        return s

    p1 = tmp_path / "one.sppt"
    p2 = tmp_path / "two.sppt"
    store_write(build(), p1)
    store_write(build(), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_store_is_bare_header(tmp_path):
    # magic (4) + version u32 (4) + tensor count u32 (4)
    path = tmp_path / "empty.sppt"
    store_write(TensorStore(), path)
    raw = path.read_bytes()
    assert len(raw) == 12
    assert raw[:4] == b"SPPT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 0


def test_meta_roundtrip(tmp_path):
    store = TensorStore()
    store.add("w", np.zeros((1, 1)))
    store.set_meta({"pattern": "unstructured", "ratio": 0.75})
    _, back = roundtrip(store, tmp_path)
    assert back.meta() == {"pattern": "unstructured", "ratio": 0.75}
    # setting meta twice keeps a single trailing entry
    store.set_meta({"pattern": "2:4", "ratio": 0.5})
    assert store.names()[-1] == "__meta__"
    assert store.names().count("__meta__") == 1


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.sppt"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(StoreFormatError) as err:
        store_read(path)
    assert err.value.offset == 0


def test_bad_version_reports_offset(tmp_path):
    path = tmp_path / "bad.sppt"
    path.write_bytes(b"SPPT" + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    with pytest.raises(StoreFormatError) as err:
        store_read(path)
    assert err.value.offset == 4


def test_truncated_header_reports_offset(tmp_path):
    path = tmp_path / "bad.sppt"
    path.write_bytes(b"SPPT" + (1).to_bytes(4, "little"))  # count missing
    with pytest.raises(StoreFormatError) as err:
        store_read(path)
    assert "tensor count" in str(err.value)
    assert err.value.offset == 8


def test_truncated_payload_names_tensor(tmp_path):
    store = TensorStore()
    store.add("weights", np.ones((4, 4)))
    path = tmp_path / "t.sppt"
    store_write(store, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])  # drop one float64
    with pytest.raises(StoreFormatError) as err:
        store_read(path)
    assert "weights" in str(err.value)


def test_trailing_garbage_rejected(tmp_path):
    store = TensorStore()
    store.add("w", np.ones((1, 1)))
    path = tmp_path / "t.sppt"
    store_write(store, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(StoreFormatError) as err:
        store_read(path)
    assert "trailing" in str(err.value)


def test_duplicate_and_bad_dtype_rejected():
    store = TensorStore()
    store.add("w", np.ones((1, 1)))
    with pytest.raises(ValueError):
        store.add("w", np.ones((1, 1)))
    with pytest.raises(ValueError):
        store.add("ints", np.ones((2, 2), dtype=np.int32))


def test_write_leaves_no_temp_files(tmp_path):
    store = TensorStore()
    store.add("w", np.ones((8, 8)))
    path = tmp_path / "out.sppt"
    store_write(store, path)
    store_write(store, path)  # overwrite in place
    assert sorted(os.listdir(tmp_path)) == ["out.sppt"]
    assert store_read(path).names() == ["w"]
