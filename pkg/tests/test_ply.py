import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splatinit.initialization import PointCloud
from splatinit.ply import PlyError, read_ply, write_ply

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def test_single_point_bit_exact(tmp_path):
    pc = PointCloud([[0.1, -2.5, 3.3333333]], [[0.2, 0.4, 0.6]])
    for binary in (True, False):
        write_ply(pc, tmp_path / "p.ply", binary=binary)
        back = read_ply(tmp_path / "p.ply")
        np.testing.assert_array_equal(back.positions.astype(np.float32), pc.positions.astype(np.float32))


def test_color_quantization(tmp_path):
    pc = PointCloud([[0, 0, 0]], [[0.5, 0.0, 1.0]])
    write_ply(pc, tmp_path / "p.ply")
    back = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(back.colors, [[128 / 255, 0.0, 1.0]])
    assert abs(back.colors[0, 0] - 0.5) <= 1 / 255


def test_header_layout(tmp_path):
    write_ply(PointCloud(np.zeros((3, 3)), np.zeros((3, 3))), tmp_path / "p.ply", binary=False)
    text = (tmp_path / "p.ply").read_text()
    assert text.startswith("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n")
    assert "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n" in text


def test_truncated_binary_names_element(tmp_path):
    write_ply(PointCloud(np.zeros((10, 3)), np.zeros((10, 3))), tmp_path / "p.ply")
    data = (tmp_path / "p.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(PlyError, match="vertex"):
        read_ply(tmp_path / "t.ply")


def test_truncated_ascii_names_element(tmp_path):
    write_ply(PointCloud(np.zeros((4, 3)), np.zeros((4, 3))), tmp_path / "p.ply", binary=False)
    lines = (tmp_path / "p.ply").read_text().splitlines()
    (tmp_path / "t.ply").write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(PlyError, match="vertex"):
        read_ply(tmp_path / "t.ply")


def test_malformed_header_reports_line(tmp_path):
    (tmp_path / "b.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex x\nend_header\n")
    with pytest.raises(PlyError, match="line 3"):
        read_ply(tmp_path / "b.ply")
    (tmp_path / "c.ply").write_bytes(b"not a ply\n")
    with pytest.raises(PlyError):
        read_ply(tmp_path / "c.ply")


def test_extra_properties_and_elements(tmp_path):
    body = (
        "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty double x\nproperty double y\n"
        "property double z\nproperty float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
        "element face 0\nproperty int flags\nend_header\n1 2 3 0 255 0 0\n4 5 6 0 0 255 0\n"
    )
    (tmp_path / "e.ply").write_text(body)
    pc = read_ply(tmp_path / "e.ply")
    np.testing.assert_array_equal(pc.positions, [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(pc.colors, [[1, 0, 0], [0, 1, 0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50).flatmap(lambda n: st.tuples(
    arrays(np.float32, (n, 3), elements=f32), arrays(np.float64, (n, 3), elements=st.floats(0, 1)))), st.booleans())
def test_roundtrip_property(tmp_path_factory, data, binary):
    pos, col = data
    pc = PointCloud(pos.astype(np.float64), col)
    path = tmp_path_factory.mktemp("ply") / "p.ply"
    write_ply(pc, path, binary=binary)
    back = read_ply(path)
    np.testing.assert_array_equal(back.positions.astype(np.float32), pos)
    assert np.abs(back.colors - col).max() <= 1 / 255 / 2 + 1e-12
