import numpy as np
import pytest

from lotr.heatmap import Heatmap, benchmark_decode, decode_argmax, render_heatmap


def test_peak_at_integer_landmark():
    h = render_heatmap((5.0, 5.0), (16, 16))
    assert h.grid[5, 5] == 1.0
    assert h.grid.max() == 1.0


def test_values_at_sigma_distances():
    sigma = 2.0
    h = render_heatmap((8.0, 8.0), (32, 32), sigma=sigma)
    assert h.grid[8, 10] == pytest.approx(np.exp(-0.5), abs=1e-12)      # distance sigma
    assert h.grid[8 + 6, 8] == pytest.approx(np.exp(-4.5), abs=1e-12)   # distance 3 sigma
    assert h.grid[10, 8] == pytest.approx(0.6065307, abs=1e-7)
    assert h.grid[8, 14] == pytest.approx(0.0111090, abs=1e-7)


def test_non_positive_sigma_rejected():
    with pytest.raises(ValueError):
        render_heatmap((2.0, 2.0), (8, 8), sigma=0.0)


def test_decode_roundtrip_integer_and_fractional():
    assert decode_argmax(render_heatmap((7.0, 3.0), (16, 16))) == (7, 3)
    assert decode_argmax(render_heatmap((7.4, 3.0), (16, 16))) == (7, 3)
    assert decode_argmax(render_heatmap((7.6, 3.0), (16, 16))) == (8, 3)


def test_decode_tie_breaks_to_first_row_major_index():
    h = Heatmap(grid=np.ones((4, 4)), landmark=(0.0, 0.0), sigma=1.0)
    assert decode_argmax(h) == (0, 0)


def test_translation_consistency():
    # exactly representable fractional coordinates so the shifted pixel
    # offsets are bit-identical
    a = render_heatmap((6.25, 7.5), (20, 20)).grid
    b = render_heatmap((6.25 + 3, 7.5 + 2), (20, 20)).grid
    assert np.array_equal(a[:-2, :-3], b[2:, 3:])


def test_decode_equals_nearest_pixel_away_from_borders():
    rng = np.random.Generator(np.random.Philox(key=50))
    sigma = 2.0
    for _ in range(200):
        x0, y0 = rng.uniform(3 * sigma, 32 - 1 - 3 * sigma, size=2)
        x, y = decode_argmax(render_heatmap((x0, y0), (32, 32), sigma=sigma))
        assert (x, y) == (int(round(x0)), int(round(y0)))


def test_benchmark_report_fields():
    rng = np.random.Generator(np.random.Philox(key=51))
    truths = rng.uniform(5, 25, size=(100, 2))
    maps = [render_heatmap(tuple(t), (32, 32)) for t in truths]
    report = benchmark_decode(maps, truths=truths)
    assert report["count"] == 100
    assert report["seconds_per_decode"] > 0
    assert np.isfinite(report["mean_abs_error_per_axis"])
    assert report["mean_abs_error_per_axis"] <= 0.5
