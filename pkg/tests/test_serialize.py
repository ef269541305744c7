import numpy as np
import numpy.testing as npt
import pytest

from depthquery import serialize as sz
from depthquery.errors import FormatError


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32),
              "b.bias": rng.standard_normal(5).astype(np.float32)}
    path = tmp_path / "model.dabs"
    sz.save_checkpoint(str(path), params)
    loaded = sz.load_checkpoint(str(path))
    assert set(loaded) == set(params)
    for name in params:
        npt.assert_array_equal(loaded[name], params[name])
    # bytes are reproducible: save the loaded dict and compare files
    path2 = tmp_path / "model2.dabs"
    sz.save_checkpoint(str(path2), loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_magic_and_version_checked(tmp_path):
    path = tmp_path / "bad.dabs"
    path.write_bytes(b"NOPE" + bytes([1]))
    with pytest.raises(FormatError, match="offset 0"):
        sz.read_records(str(path))
    path.write_bytes(sz.MAGIC + bytes([9]))
    with pytest.raises(FormatError, match="version"):
        sz.read_records(str(path))


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "trunc.dabs"
    sz.save_checkpoint(str(path), {"w": np.ones((2, 2), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError, match="byte offset"):
        sz.read_records(str(path))


def test_truncation_returns_no_partial_stack(tmp_path):
    path = tmp_path / "stack.dabs"
    states = [np.arange(6, dtype=np.float32).reshape(3, 2) for _ in range(2)]
    sz.save_stack(str(path), states)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        sz.load_stack(str(path))


def test_stack_roundtrip_and_header(tmp_path):
    rng = np.random.default_rng(1)
    states = [rng.standard_normal((4, 3)).astype(np.float32) for _ in range(5)]
    path = tmp_path / "stack.dabs"
    sz.save_stack(str(path), states)
    loaded = sz.load_stack(str(path))
    assert len(loaded) == 5
    for a, b in zip(states, loaded):
        npt.assert_array_equal(a, b)


def test_little_endian_layout_is_fixed(tmp_path):
    # one scalar record: the wire bytes are fully pinned by the format
    path = tmp_path / "one.dabs"
    sz.write_records(str(path), [("x", np.array([1.0], dtype=np.float32))])
    blob = path.read_bytes()
    expected = (sz.MAGIC + bytes([sz.VERSION])
                + (1).to_bytes(4, "little") + b"x"
                + (1).to_bytes(4, "little")
                + (1).to_bytes(8, "little")
                + np.float32(1.0).tobytes())
    assert blob == expected


def test_substrate_roundtrip_preserves_order_flag(tmp_path):
    rng = np.random.default_rng(2)
    enhanced = rng.standard_normal((4, 3)).astype(np.float32)
    levels = [rng.standard_normal((4, 3)).astype(np.float32) for _ in range(3)]
    path = tmp_path / "sub.dabs"
    sz.save_substrate(str(path), enhanced, levels, "reversed")
    e2, lv2, order = sz.load_substrate(str(path))
    assert order == "reversed"
    npt.assert_array_equal(e2, enhanced)
    for a, b in zip(levels, lv2):
        npt.assert_array_equal(a, b)
