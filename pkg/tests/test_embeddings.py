import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdad.embeddings import (
    EmbeddingStore,
    StoreWriter,
    as_vector,
    l2_normalize,
    open_store,
    write_store,
)
from sdad.errors import (
    DimensionMismatch,
    FormatError,
    SchemaError,
    ZeroVectorError,
)


def test_file_layout_against_manual_parse(tmp_path):
    rows = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    path = tmp_path / "e.bin"
    write_store(path, ["a", "b", "c"], rows)

    raw = path.read_bytes()
    magic, dim, count = struct.unpack("<8sIQ", raw[:20])
    assert magic == b"SDADEMB1"
    assert (dim, count) == (4, 3)
    assert len(raw) == 20 + 3 * 4 * 4
    payload = np.frombuffer(raw[20:], dtype="<f4").reshape(3, 4)
    assert np.array_equal(payload, rows.astype(np.float32))

    meta = json.loads((tmp_path / "e.bin.meta.json").read_text("utf-8"))
    assert meta["ids"] == ["a", "b", "c"]


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((5, 8))
    path = tmp_path / "s.bin"
    write_store(path, [f"id{i}" for i in range(5)], rows)
    store = open_store(path)
    assert store.dimension == 8
    assert store.count == 5
    for i in range(5):
        assert np.array_equal(store.get_row(i), rows[i].astype(np.float32).astype(np.float64))
    assert store.row_for_id("id3") == 3


def test_get_row_returns_float64(tmp_path):
    write_store(tmp_path / "s.bin", ["x"], np.ones((1, 2)))
    row = open_store(tmp_path / "s.bin").get_row(0)
    assert row.dtype == np.float64


def test_get_row_bounds(tmp_path):
    write_store(tmp_path / "s.bin", ["x"], np.ones((1, 2)))
    store = open_store(tmp_path / "s.bin")
    with pytest.raises(IndexError):
        store.get_row(1)
    with pytest.raises(IndexError):
        store.get_row(-1)


def test_bad_magic(tmp_path):
    path = tmp_path / "s.bin"
    write_store(path, ["x"], np.ones((1, 2)))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        open_store(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "s.bin"
    write_store(path, ["x", "y"], np.ones((2, 3)))
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(FormatError):
        open_store(path)


def test_trailing_garbage(tmp_path):
    path = tmp_path / "s.bin"
    write_store(path, ["x"], np.ones((1, 3)))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        open_store(path)


def test_id_count_mismatch(tmp_path):
    path = tmp_path / "s.bin"
    write_store(path, ["x", "y"], np.ones((2, 3)))
    meta = tmp_path / "s.bin.meta.json"
    meta.write_text(json.dumps({"ids": ["x"]}), "utf-8")
    with pytest.raises((FormatError, SchemaError)):
        open_store(path)


def test_writer_appends_and_indexes(tmp_path):
    path = tmp_path / "w.bin"
    with StoreWriter(path, dimension=3) as w:
        assert w.append("a", [1.0, 2.0, 3.0]) == 0
        assert w.append("b", np.array([4.0, 5.0, 6.0])) == 1
    store = open_store(path)
    assert store.count == 2
    assert store.ids == ("a", "b") or list(store.ids) == ["a", "b"]


def test_writer_aborts_on_exception(tmp_path):
    path = tmp_path / "w.bin"
    with pytest.raises(RuntimeError):
        with StoreWriter(path, dimension=2) as w:
            w.append("a", [1.0, 2.0])
            raise RuntimeError("boom")
    assert not path.exists()


def test_writer_rejects_wrong_dimension(tmp_path):
    with StoreWriter(tmp_path / "w.bin", dimension=2) as w:
        w.append("a", [1.0, 2.0])
        with pytest.raises(DimensionMismatch):
            w.append("b", [1.0, 2.0, 3.0])


def test_non_finite_rejected(tmp_path):
    with pytest.raises(FormatError):
        write_store(tmp_path / "n.bin", ["a"], np.array([[np.nan, 1.0]]))


def test_as_vector_validation():
    v = as_vector([1, 2, 3])
    assert v.dtype == np.float64 and v.shape == (3,)
    with pytest.raises(DimensionMismatch):
        as_vector([1.0, 2.0], dimension=3)
    with pytest.raises(DimensionMismatch):
        as_vector([[1.0], [2.0]])
    with pytest.raises(FormatError):
        as_vector([np.inf])


@given(
    st.lists(
        st.floats(min_value=-100, max_value=100, allow_nan=False),
        min_size=1,
        max_size=16,
    ).filter(lambda xs: any(abs(x) > 1e-9 for x in xs))
)
@settings(max_examples=100)
def test_l2_normalize_unit_norm(xs):
    v = l2_normalize(np.array(xs))
    assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-12


def test_l2_normalize_zero_vector():
    with pytest.raises(ZeroVectorError):
        l2_normalize(np.zeros(4))


def test_store_in_memory_validation():
    with pytest.raises(FormatError):
        EmbeddingStore(
            dimension=2,
            rows=np.ones((2, 2), dtype=np.float32),
            ids=("a",),
        )
