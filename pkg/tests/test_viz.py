import numpy as np
import pytest
from PIL import Image

from flowspike.errors import ShapeError
from flowspike.viz import arrow_grid_overlay, cell_maxima, color_wheel, flow_to_rgb, render_flow

from oracles import middlebury_wheel


def reference_rgb(u, v):
    """Classic per-pixel flow colouring on already-normalized (u, v)."""
    wheel = middlebury_wheel()
    ncols = wheel.shape[0]
    rad = np.sqrt(u * u + v * v)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = int(np.floor(fk))
    k1 = k0 + 1 if k0 + 1 < ncols else 0
    f = fk - k0
    out = []
    for ch in range(3):
        col = ((1 - f) * wheel[k0, ch] + f * wheel[k1, ch]) / 255
        col = 1 - rad * (1 - col) if rad <= 1 else col * 0.75
        out.append(int(np.floor(255 * col)))
    return tuple(out)


def one(u, v):
    f = np.zeros((2, 1, 1))
    f[:, 0, 0] = (u, v)
    return f


def test_wheel_matches_reference():
    np.testing.assert_array_equal(color_wheel(), middlebury_wheel())


def test_zero_flow_is_white():
    assert (flow_to_rgb(np.zeros((2, 4, 5))) == 255).all()
    assert flow_to_rgb(np.zeros((2, 4, 5))).shape == (4, 5, 3)


def test_rightward_full_magnitude_is_zero_degree_colour():
    rgb = flow_to_rgb(one(3.0, 0.0), max_magnitude=3.0)[0, 0]
    assert tuple(rgb) == tuple(np.floor(middlebury_wheel()[0]).astype(int)) == (255, 0, 0)


@pytest.mark.parametrize("angle", np.linspace(0, 2 * np.pi, 17)[:-1])
def test_opposite_directions_use_opposite_wheel_entries(angle):
    u, v = np.cos(angle), np.sin(angle)
    assert tuple(flow_to_rgb(one(u, v), 1.0)[0, 0]) == reference_rgb(u, v)
    assert tuple(flow_to_rgb(one(-u, -v), 1.0)[0, 0]) == reference_rgb(-u, -v)
    # half a turn moves the wheel index by half its length
    a1 = (np.arctan2(-v, -u) / np.pi + 1) / 2
    a2 = (np.arctan2(v, u) / np.pi + 1) / 2
    assert abs(abs(a1 - a2) - 0.5) < 1e-9


def test_matches_reference_everywhere(rng):
    f = rng.normal(size=(2, 6, 7)) * 2
    f[:, 0, 0] = (0.0, 0.0)
    m = 3.0
    img = flow_to_rgb(f, max_magnitude=m)
    for y in range(6):
        for x in range(7):
            assert tuple(img[y, x]) == reference_rgb(f[0, y, x] / m, f[1, y, x] / m)


def test_auto_scaling_and_determinism(rng):
    f = rng.normal(size=(2, 5, 5))
    a = flow_to_rgb(f)
    assert np.array_equal(a, flow_to_rgb(f.copy(), "auto"))
    mx = np.hypot(f[0], f[1]).max()
    assert np.array_equal(a, flow_to_rgb(f, mx))
    assert np.array_equal(flow_to_rgb(2 * f), a)


def test_bad_inputs():
    with pytest.raises(ShapeError):
        flow_to_rgb(np.zeros((3, 2, 2)))
    with pytest.raises(ValueError):
        flow_to_rgb(np.zeros((2, 2, 2)), -1.0)


class TestArrows:
    def test_zero_flow_draws_nothing(self):
        img = np.full((20, 20, 3), 255, np.uint8)
        assert np.array_equal(arrow_grid_overlay(img, np.zeros((2, 20, 20))), img)

    def test_cell_maxima_picks_largest(self):
        f = np.zeros((2, 20, 20))
        f[:, 3, 4] = (1, 0)
        f[:, 7, 2] = (0, -5)
        f[:, 15, 15] = (2, 2)
        cells = cell_maxima(f, 10)
        assert cells == [(4.5, 4.5, 0.0, -5.0), (14.5, 14.5, 2.0, 2.0)]

    def test_single_vector_arrow_matches(self):
        f = np.zeros((2, 20, 20))
        f[0, 5, 5] = 6.0
        img = arrow_grid_overlay(np.full((20, 20, 3), 255, np.uint8), f, cell=20)
        dark = np.argwhere(img.sum(axis=2) < 765)
        # one horizontal shaft from the cell centre heading right
        assert dark[:, 1].min() >= 9 and dark[:, 1].max() >= 15
        assert set(dark[:, 0]) <= set(range(6, 14))

    def test_cell_equal_height_gives_one_arrow(self, rng):
        f = rng.normal(size=(2, 12, 12))
        assert len(cell_maxima(f, 12)) == 1

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            arrow_grid_overlay(np.zeros((4, 4, 3), np.uint8), np.zeros((2, 5, 5)))


def test_render_writes_png(tmp_path, rng):
    path = tmp_path / "f.png"
    img = render_flow(rng.normal(size=(2, 20, 30)), path, arrows=10)
    with Image.open(path) as im:
        assert im.size == (30, 20) and im.mode == "RGB"
        assert np.array_equal(np.asarray(im), img)
