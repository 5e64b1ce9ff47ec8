import numpy as np
import pytest

from stylebook_vc import fileio


def test_matrix_roundtrip_with_labels(tmp_path):
    path = tmp_path / "m.sbm"
    mat = np.arange(12, dtype=np.float32).reshape(4, 3)
    labels = np.array([3, 1, 4, 1])
    fileio.write_matrix(path, mat, labels)
    out, out_labels = fileio.read_matrix(path)
    assert np.array_equal(out, mat)
    assert np.array_equal(out_labels, labels)


def test_matrix_roundtrip_without_labels(tmp_path):
    path = tmp_path / "m.sbm"
    mat = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
    fileio.write_matrix(path, mat)
    out, labels = fileio.read_matrix(path)
    assert np.array_equal(out, mat)
    assert labels is None


def test_matrix_header_is_16_bytes(tmp_path):
    path = tmp_path / "m.sbm"
    fileio.write_matrix(path, np.zeros((2, 3), dtype=np.float32))
    assert path.stat().st_size == 16 + 2 * 3 * 4


def test_matrix_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.sbm"
    path.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(fileio.FormatError, match="bad magic"):
        fileio.read_matrix(path)


def test_matrix_truncation_rejected(tmp_path):
    path = tmp_path / "m.sbm"
    fileio.write_matrix(path, np.zeros((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(fileio.FormatError, match="truncated"):
        fileio.read_matrix(path)


def test_tensor_container_roundtrip(tmp_path):
    path = tmp_path / "c.sbc"
    rng = np.random.default_rng(1)
    tensors = {
        "alpha.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "beta": rng.standard_normal(5).astype(np.float32),
    }
    meta = {"step": 12, "nested": {"lr": 1e-4}}
    fileio.save_tensors(path, tensors, meta)
    out, out_meta = fileio.load_tensors(path)
    assert set(out) == set(tensors)
    for k in tensors:
        assert np.array_equal(out[k], tensors[k])
    assert out_meta == meta


def test_tensor_container_deterministic_bytes(tmp_path):
    tensors = {"b": np.ones((2, 2), dtype=np.float32), "a": np.zeros(3, dtype=np.float32)}
    fileio.save_tensors(tmp_path / "x.sbc", tensors, {"k": 1})
    fileio.save_tensors(tmp_path / "y.sbc", dict(reversed(tensors.items())), {"k": 1})
    assert (tmp_path / "x.sbc").read_bytes() == (tmp_path / "y.sbc").read_bytes()


def test_tensor_container_version_check(tmp_path):
    path = tmp_path / "c.sbc"
    fileio.save_tensors(path, {"a": np.zeros(1, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # bump the version field
    path.write_bytes(bytes(raw))
    with pytest.raises(fileio.FormatError, match="version"):
        fileio.load_tensors(path)


def test_stylebook_file_roundtrip(tmp_path):
    path = tmp_path / "s.sbk"
    values = np.random.default_rng(2).standard_normal((6, 4)).astype(np.float32)
    fileio.write_stylebook_file(path, values, "speaker 3, 12 utterances")
    out, prov = fileio.read_stylebook_file(path)
    assert np.array_equal(out, values)
    assert prov == "speaker 3, 12 utterances"
    assert fileio.stylebook_payload_bytes(path) == 6 * 4 * 4


def test_stylebook_header_is_24_bytes(tmp_path):
    path = tmp_path / "s.sbk"
    fileio.write_stylebook_file(path, np.zeros((2, 2), dtype=np.float32), "")
    assert path.stat().st_size == 24 + 2 * 2 * 4  # no provenance block when empty


def test_stylebook_bad_magic(tmp_path):
    path = tmp_path / "s.sbk"
    path.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(fileio.FormatError, match="bad magic"):
        fileio.read_stylebook_file(path)


def test_json_writer_is_deterministic(tmp_path):
    fileio.write_json(tmp_path / "a.json", {"b": 1, "a": [1, 2]})
    fileio.write_json(tmp_path / "b.json", {"a": [1, 2], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
