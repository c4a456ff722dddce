import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phylokern.errors import DataValidationError
from phylokern.matrixio import (KERNEL_MAGIC, SIMILARITY_MAGIC, from_binary, from_tsv,
                                read_matrix, to_binary, to_tsv, write_matrix)

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.integers(1, 6).flatmap(lambda n: arrays(np.float64, (n, n), elements=finite)))
def test_tsv_and_binary_round_trip_exactly(values):
    ids = tuple(f"id{i}" for i in range(values.shape[0]))
    got_ids, got = from_tsv(to_tsv(ids, values))
    assert got_ids == ids
    assert got.tobytes() == values.reshape(len(ids), len(ids)).tobytes()
    b_ids, b_vals, magic = from_binary(to_binary(ids, values, KERNEL_MAGIC))
    assert b_ids == ids and magic == KERNEL_MAGIC
    assert b_vals.tobytes() == values.tobytes()


def test_unicode_ids_survive_binary():
    ids = ("otu-α", "otu β")
    got, _, _ = from_binary(to_binary(ids, np.eye(2), SIMILARITY_MAGIC))
    assert got == ids


def test_bad_magic_and_wrong_container():
    with pytest.raises(DataValidationError, match="magic"):
        from_binary(b"NOPE" + bytes(20))
    with pytest.raises(DataValidationError, match="expected"):
        from_binary(to_binary(("a",), np.eye(1), KERNEL_MAGIC), SIMILARITY_MAGIC)


def test_truncated_payload():
    data = to_binary(("a", "b"), np.eye(2), KERNEL_MAGIC)
    with pytest.raises(DataValidationError, match="truncated"):
        from_binary(data[:-3])


def test_tsv_errors():
    with pytest.raises(DataValidationError):
        from_tsv("")
    with pytest.raises(DataValidationError, match="row ids"):
        from_tsv("\ta\tb\nb\t1\t0\na\t0\t1\n")
    with pytest.raises(DataValidationError, match="fields"):
        from_tsv("\ta\tb\na\t1\n")


@pytest.mark.parametrize("name", ["m.tsv", "m.bin", "m.pkk"])
def test_write_read_by_suffix(tmp_path, name):
    values = np.array([[2.0, 0.5], [0.5, 1.0]])
    write_matrix(tmp_path / name, ("x", "y"), values, KERNEL_MAGIC)
    ids, got = read_matrix(tmp_path / name)
    assert ids == ("x", "y")
    np.testing.assert_array_equal(got, values)
    assert (tmp_path / name).read_bytes()[:4] == (b"PKK1" if name != "m.tsv" else b"\tx\ty")
