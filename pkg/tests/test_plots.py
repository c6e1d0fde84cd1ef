"""SVG writers and PPM/PGM round trips."""

import json
import math

import numpy as np

from adapterlab import imageio, svgplot


def test_bar_chart_handles_inf(tmp_path):
    path = tmp_path / "bars.svg"
    svgplot.bar_chart(path, ["a", "b", "c"], [1.0, math.inf, 0.25], "title & more", "F")
    text = path.read_text()
    assert text.startswith("<svg")
    assert "inf" in text
    assert "title &amp; more" in text  # escaped


def test_heatmap_empty_cells(tmp_path):
    path = tmp_path / "heat.svg"
    svgplot.heatmap(path, ["r0", "r1"], ["c0", "c1"], [[1.0, None], [0.5, 2.0]], "grid")
    text = path.read_text()
    assert text.count('fill="#f4f4f4"') == 1


def test_scatter_with_diagonal(tmp_path):
    path = tmp_path / "scatter.svg"
    svgplot.scatter(path, [0.1, 0.5], [0.2, 0.4], ["s0", "s1"], "cmp", "x", "y")
    text = path.read_text()
    assert "circle" in text and "stroke-dasharray" in text


def test_ppm_roundtrip_quantization(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.uniform(-1, 1, size=(3, 5, 7))
    path = tmp_path / "img.ppm"
    imageio.write_ppm(path, img)
    back = imageio.read_ppm(path)
    assert back.shape == (3, 5, 7)
    assert np.abs(back - img).max() <= 1.0 / 127.5


def test_pgm_sidecar_records_range(tmp_path):
    heat = np.array([[0.0, 2.5], [5.0, 1.0]])
    path = tmp_path / "h.pgm"
    imageio.write_pgm(path, heat)
    back = imageio.read_pgm(path)
    assert back.shape == (2, 2)
    meta = json.loads((tmp_path / "h.pgm.json").read_text())
    assert meta == {"min": 0.0, "max": 5.0}
    assert back[1][0] == 255.0 and back[0][0] == 0.0
