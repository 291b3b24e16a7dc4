import numpy as np
import pytest
from hypothesis import given, strategies as st

from clecnn import localize as Lz
from clecnn import network
from clecnn.errors import ConfigError, ShapeError
from clecnn.network import build, get_spec
from clecnn.tensor import make_rng


@pytest.fixture(scope="module")
def model():
    return build(get_spec("net1-mini"), rng=make_rng(0))


@given(st.integers(1, 2000), st.integers(1, 300), st.integers(1, 300))
def test_window_count_formula(extent, w, s):
    if w > extent:
        with pytest.raises(ShapeError):
            Lz.window_positions(extent, w, s)
        return
    pos = Lz.window_positions(extent, w, s)
    assert len(pos) == (extent - w) // s + 1
    assert pos == list(range(0, len(pos) * s, s))
    assert pos[-1] + w <= extent and pos[-1] + s + w > extent


def test_window_examples():
    assert Lz.window_positions(10, 4, 3) == [0, 3, 6]
    assert len(Lz.window_positions(1024, 227, 79)) == 11
    assert Lz.window_positions(227, 227, 79) == [0]
    g = Lz.WindowGrid.for_image(1024, 1024, 227, 79, truncate=10)
    assert (len(g.rows), len(g.cols)) == (10, 10)
    assert len(Lz.WindowGrid.for_image(64, 64, 32, 16).rows) == 3


def test_map_equals_per_window_inference(model):
    img = np.random.default_rng(1).integers(0, 256, (112, 96), dtype=np.uint8)
    dmap = Lz.diagnostic_map(model, img, 64, 16)
    assert dmap.values.shape == (4, 3)
    plane = img.astype(np.float32) / np.float32(255)
    for r in range(4):
        for c in range(3):
            x = plane[r * 16:r * 16 + 64, c * 16:c * 16 + 64][None, None]
            assert dmap.values[r, c] == network.forward(model, x)[0, 1]
    assert np.all((0 <= dmap.values) & (dmap.values <= 1))


def test_resized_windows_match_direct_inference(model):
    img = np.random.default_rng(2).integers(0, 256, (128, 128), dtype=np.uint8)
    dmap = Lz.diagnostic_map(model, img, 96, 32)
    plane = img.astype(np.float32) / np.float32(255)
    for r, c in [(0, 0), (1, 0), (1, 1)]:
        batch = Lz.window_input(plane, r * 32, c * 32, 96, 64)
        assert batch.shape == (1, 1, 64, 64)
        assert dmap.values[r, c] == network.forward(model, batch)[0, 1]


def test_constant_image_gives_constant_map(model):
    dmap = Lz.diagnostic_map(model, np.full((96, 96), 90, np.uint8), 64, 16)
    assert np.all(dmap.values == dmap.values[0, 0])


def test_top_boxes():
    values = np.array([[0.2, 0.9, 0.5], [0.9, 0.1, 0.7]])
    dmap = Lz.DiagnosticMap(values, "img", 32, 16)
    boxes = Lz.top_boxes(dmap, 1)
    assert [(b.x, b.y, b.score) for b in boxes] == [(16, 0, 0.9)]
    boxes = Lz.top_boxes(dmap, 10)
    assert [b.score for b in boxes] == [0.9, 0.9, 0.7, 0.5, 0.2, 0.1]
    # tie broken in row-major order
    assert boxes[0].cell(16) == (0, 1) and boxes[1].cell(16) == (1, 0)
    assert Lz.top_boxes(dmap, 3, min_score=1.1) == []
    with pytest.raises(ConfigError):
        Lz.top_boxes(dmap, 0)


def test_outputs(model, tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (80, 80), dtype=np.uint8)
    dmap = Lz.diagnostic_map(model, img, 64, 16, "f1")
    dmap.write_csv(tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 1 + 4
    boxes = Lz.top_boxes(dmap, 2)
    Lz.write_boxes(boxes, "f1", tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "image_id,x,y,w,score" and len(lines) == 3
    Lz.overlay_svg(img, boxes, tmp_path / "o.svg")
    svg = (tmp_path / "o.svg").read_text()
    assert svg.count("<rect") == 2 and "data:image/png;base64," in svg


# ---------------------------------------------------------------- activation maps

def test_colormap_is_bijective():
    gray = np.arange(256, dtype=np.uint8).reshape(16, 16)
    rgb = Lz.colorize(gray)
    assert len({tuple(c) for c in rgb.reshape(-1, 3).tolist()}) == 256
    np.testing.assert_array_equal(Lz.decolorize(rgb), gray)
    # low values dark blue, high values warm
    assert tuple(Lz.WARM_LUT[0]) == (0, 0, 96) and Lz.WARM_LUT[255][0] == 255 and Lz.WARM_LUT[255][2] == 0


def test_plane_normalisation():
    g = Lz.normalize_plane(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert g.min() == 0 and g.max() == 255
    assert not Lz.normalize_plane(np.full((3, 3), 4.0)).any()


def test_export_96_planes_of_net1(tmp_path):
    spec = get_spec("net1")
    m = network.Model(spec)  # zero weights: no need to draw 60M random numbers
    m.params["conv1"].weights[...] = init = make_rng(0).standard_normal(m.params["conv1"].weights.shape) * 0.01
    img = np.random.default_rng(0).integers(0, 256, (227, 227), dtype=np.uint8)
    files = Lz.export_activation_maps(m, img, "conv1", tmp_path)
    assert len([f for f in files if f.suffix == ".pgm"]) == 96 and len([f for f in files if f.suffix == ".ppm"]) == 96
    planes = Lz.layer_activations(m, img, "conv1")
    assert planes.shape == (96, 55, 55) and init.shape[0] == 96
    for k in (0, 50):
        gray = Lz.read_pnm(tmp_path / f"conv1_{k:03d}.pgm")
        np.testing.assert_array_equal(gray, Lz.normalize_plane(planes[k]))
        if planes[k].max() > planes[k].min():
            assert gray.min() == 0 and gray.max() == 255
        np.testing.assert_array_equal(Lz.read_pnm(tmp_path / f"conv1_{k:03d}_warm.ppm"), Lz.colorize(gray))
    index = (tmp_path / "index.csv").read_text().splitlines()
    assert len(index) == 97


def test_zero_input_zero_bias_gives_zero_maps(model, tmp_path):
    Lz.export_activation_maps(model, np.zeros((64, 64), np.uint8), "conv1", tmp_path)
    for f in tmp_path.glob("*.pgm"):
        assert not Lz.read_pnm(f).any()


def test_unknown_layer_lists_available(model, tmp_path):
    with pytest.raises(ConfigError, match="conv1, conv2"):
        Lz.export_activation_maps(model, np.zeros((64, 64), np.uint8), "fc3", tmp_path)
