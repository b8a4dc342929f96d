import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from splitleak import reports as R
from splitleak.errors import IoFailure


def test_fmt():
    assert [R.fmt(v) for v in (None, True, False, 3, 0.5, np.float32(0.25), math.inf, "x")] == [
        "", "true", "false", "3", "0.500000", "0.250000", "inf", "x"
    ]


def test_csv_header_always_present(tmp_path):
    data = R.write_csv(tmp_path / "e.csv", ["a", "b"], [])
    assert data == b"a,b\r\n"
    R.write_csv(tmp_path / "r.csv", ["a", "b"], [{"a": 1, "b": "x,y"}, {"a": None, "b": 'q"'}])
    assert (tmp_path / "r.csv").read_bytes() == b'a,b\r\n1,"x,y"\r\n,"q"""\r\n'
    assert R.read_csv(tmp_path / "r.csv") == [{"a": "1", "b": "x,y"}, {"a": "", "b": 'q"'}]


def test_csv_rerun_byte_identical(tmp_path):
    rows = [{"k": i, "v": i / 7} for i in range(5)]
    assert R.write_csv(tmp_path / "a.csv", ["k", "v"], rows) == R.write_csv(tmp_path / "b.csv", ["k", "v"], rows)


@pytest.mark.parametrize(
    "svg",
    [
        R.line_plot({"a & b": [(1, 0.1), (2, 0.5)], "<c>": [(1, 0.2), (2, 0.2)]}, "t", "x", "y"),
        R.line_plot({}),
        R.scatter_plot([(0.1, 0.2), (0.3, 0.9)], "s"),
        R.scatter_plot([(1.0, 1.0)]),
        R.heat_grid([[0.1, -0.2], [float("nan"), 0.0]], ["r1", "r2"], ["c1", "c2"], "h"),
    ],
)
def test_svg_is_well_formed(svg):
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")


def test_heat_grid_cell_count():
    root = ET.fromstring(R.heat_grid(np.zeros((3, 4)), list("abc"), list("wxyz")))
    cells = [e for e in root.iter() if e.tag.endswith("rect")]
    assert len(cells) == 1 + 12  # background + cells


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    rgb[0, 0] = [32, 10, 13]  # whitespace byte values right after the header
    R.write_ppm(tmp_path / "x.ppm", rgb)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(R.read_ppm(tmp_path / "x.ppm"), rgb)


def test_image_grid_layout():
    a = np.zeros((3, 4, 4))
    b = np.ones((1, 4, 4))
    grid = R.image_grid([[a, b], [b, a]])
    assert grid.shape == (2 * 5 + 1, 2 * 5 + 1, 3)
    assert (grid[1:5, 6:10] == 255).all() and (grid[1:5, 1:5] == 0).all()


def test_manifest_hashes(tmp_path):
    R.write_csv(tmp_path / "a.csv", ["x"], [{"x": 1}])
    path = R.write_manifest(tmp_path, "demo", {"seed": 3}, [tmp_path / "a.csv"])
    import json

    body = json.loads(path.read_text())
    assert body["config"] == {"seed": 3}
    assert body["artifacts"]["a.csv"] == R.sha256_file(tmp_path / "a.csv")


def test_write_failure_is_structured(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(IoFailure):
        R.write_csv(tmp_path / "f" / "x.csv", ["a"], [])
