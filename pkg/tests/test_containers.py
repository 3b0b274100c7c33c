import numpy as np
import pytest

from smoothsep import containers


def test_float32_roundtrip(tmp_path, gen):
    arr = gen.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.ssnt"
    containers.write_tensor(path, arr)
    back = containers.read_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_uint8_roundtrip(tmp_path, gen):
    arr = gen.integers(0, 255, (7, 9)).astype(np.uint8)
    path = tmp_path / "m.ssnt"
    containers.write_tensor(path, arr)
    back = containers.read_tensor(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, arr)


def test_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "h.ssnt"
    containers.write_tensor(path, arr)
    blob = path.read_bytes()
    assert blob[:4] == b"SSNT"
    assert blob[4] == 1                      # version
    assert blob[5] == 0                      # float32 dtype code
    assert blob[6] == 2                      # rank
    dims = np.frombuffer(blob[7:15], dtype="<u4")
    np.testing.assert_array_equal(dims, [2, 3])
    payload = np.frombuffer(blob[15:], dtype="<f4")
    np.testing.assert_array_equal(payload, arr.reshape(-1))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ssnt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(containers.ContainerError):
        containers.read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.ssnt"
    containers.write_tensor(path, np.zeros((4, 4), np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(containers.ContainerError):
        containers.read_tensor(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(containers.ContainerError):
        containers.write_tensor(tmp_path / "x.ssnt",
                                np.zeros(3, dtype=np.int64))


def test_manifest_shape_check(tmp_path):
    containers.save_checkpoint(tmp_path, {"w": np.zeros((2, 2), np.float32)})
    manifest = tmp_path / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("2x2", "2x3"))
    with pytest.raises(containers.ContainerError):
        containers.load_checkpoint(tmp_path)


def test_checkpoint_writes_are_reproducible(tmp_path, gen):
    params = {"a.w": gen.standard_normal((3, 3)).astype(np.float32),
              "a.b": np.zeros(3, np.float32)}
    containers.save_checkpoint(tmp_path / "one", params, "k = v\n")
    containers.save_checkpoint(tmp_path / "two", params, "k = v\n")
    for name in ("manifest.txt", "a_w.ssnt", "a_b.ssnt", "config.cfg"):
        assert (tmp_path / "one" / name).read_bytes() == \
            (tmp_path / "two" / name).read_bytes()
