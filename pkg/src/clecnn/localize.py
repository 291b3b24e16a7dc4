"""Sliding-window diagnostic maps, bounding boxes and first-layer activation maps."""
import base64
import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import network
from .errors import ConfigError, ShapeError
from .layers import relu_forward


def window_positions(extent, w, s):
    """Top-left offsets 0, s, 2s, ... of every window of width ``w`` that fits in ``extent``."""
    if s < 1 or w < 1:
        raise ConfigError("window and stride must be >= 1")
    if w > extent:
        raise ShapeError(f"window {w} larger than image extent {extent}")
    return list(range(0, (extent - w) // s * s + 1, s))


@dataclass
class WindowGrid:
    w: int
    s: int
    rows: list
    cols: list

    @classmethod
    def for_image(cls, height, width, w, s, truncate=None):
        rows, cols = window_positions(height, w, s), window_positions(width, w, s)
        if truncate is not None:
            rows, cols = rows[:truncate], cols[:truncate]
        return cls(w, s, rows, cols)


@dataclass
class DiagnosticMap:
    values: np.ndarray  # (rows, cols) positive-class probabilities
    image_id: str
    w: int
    s: int

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["row", "col", "y", "x", "p_diagnostic"])
            for r in range(self.values.shape[0]):
                for c in range(self.values.shape[1]):
                    out.writerow([r, c, r * self.s, c * self.s, repr(float(self.values[r, c]))])


@dataclass
class BoundingBox:
    x: int
    y: int
    w: int
    score: float

    def cell(self, s):
        return self.y // s, self.x // s


def _as_plane(image):
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got shape {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255)
    return img.astype(np.float32, copy=False)


def window_input(plane, y, x, w, size):
    """Crop the window at (y, x) and bilinearly resize it to the model input size."""
    crop = plane[y:y + w, x:x + w]
    if w != size:
        crop = np.asarray(Image.fromarray(crop, mode="F").resize((size, size), Image.BILINEAR), dtype=np.float32)
    return crop[None, None]


def window_probability(model, image, y, x, w):
    """Positive-class probability of one window (one forward call, inference mode)."""
    plane = _as_plane(image)
    c, size, _ = model.spec.input_shape
    batch = window_input(plane, y, x, w, size)
    if c != 1:
        batch = network.replicate_channels(batch, c)
    return float(network.forward(model, batch)[0, 1])


def diagnostic_map(model, image, w, s, image_id="image", truncate=None):
    """Grid of positive-class probabilities, cell (r, c) = window at (r*s, c*s).

    Each window is classified on its own so values match single-window
    inference bit for bit. ``truncate`` keeps only the first N positions
    per axis (10 reproduces the published 10x10 map for 1024/227/79).
    """
    plane = _as_plane(image)
    grid = WindowGrid.for_image(plane.shape[0], plane.shape[1], w, s, truncate)
    values = np.empty((len(grid.rows), len(grid.cols)))
    for r, y in enumerate(grid.rows):
        for c, x in enumerate(grid.cols):
            values[r, c] = window_probability(model, plane, y, x, w)
    return DiagnosticMap(values, image_id, w, s)


def top_boxes(dmap, n=1, min_score=0.0):
    """Boxes at the ``n`` highest cells scoring >= ``min_score``; ties in row-major order."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    flat = dmap.values.ravel()
    order = np.argsort(-flat, kind="stable")
    boxes = []
    for i in order[:n]:
        if flat[i] < min_score:
            break
        r, c = divmod(int(i), dmap.values.shape[1])
        boxes.append(BoundingBox(c * dmap.s, r * dmap.s, dmap.w, float(flat[i])))
    return boxes


def write_boxes(boxes, image_id, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "x", "y", "w", "score"])
        for b in boxes:
            out.writerow([image_id, b.x, b.y, b.w, repr(b.score)])


def overlay_svg(image, boxes, path):
    """SVG with the source frame embedded and one rectangle per box."""
    plane = _as_plane(image)
    buf = io.BytesIO()
    Image.fromarray(np.round(plane * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    data = base64.b64encode(buf.getvalue()).decode("ascii")
    h, w = plane.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<image width="{w}" height="{h}" href="data:image/png;base64,{data}"/>']
    for b in boxes:
        parts.append(f'<rect x="{b.x}" y="{b.y}" width="{b.w}" height="{b.w}" fill="none" '
                     f'stroke="#ff3030" stroke-width="2"><title>{b.score:.4f}</title></rect>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------- activation maps

def _build_warm_lut():
    # dark blue -> violet -> red -> yellow; every step changes at least one
    # channel monotonically, so the table is injective
    anchors = [(0, (0, 0, 96)), (85, (160, 0, 200)), (170, (255, 0, 0)), (255, (255, 255, 0))]
    lut = np.zeros((256, 3), dtype=np.uint8)
    for (a, ca), (b, cb) in zip(anchors, anchors[1:]):
        t = (np.arange(a, b + 1) - a) / (b - a)
        lut[a:b + 1] = np.round(np.outer(1 - t, ca) + np.outer(t, cb)).astype(np.uint8)
    return lut


WARM_LUT = _build_warm_lut()


def colorize(gray):
    return WARM_LUT[gray]


def decolorize(rgb):
    """Inverse of :func:`colorize`."""
    inverse = {tuple(c): i for i, c in enumerate(WARM_LUT.tolist())}
    flat = rgb.reshape(-1, 3).tolist()
    return np.array([inverse[tuple(c)] for c in flat], dtype=np.uint8).reshape(rgb.shape[:-1])


def normalize_plane(plane):
    """Min-max scale to 0..255; a constant plane maps to zeros."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, gray):
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = map(int, dims.split())
    channels = 3 if magic == b"P6" else 1
    arr = np.frombuffer(rest, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def layer_activations(model, image, layer_name):
    """Feature planes (C, H, W) produced by the named conv layer.

    When the conv layer is followed by a ReLU the rectified planes are
    returned, matching an in-place activation.
    """
    names = [layer.name for layer in model.layers]
    convs = [layer.name for layer in model.layers if isinstance(layer, network.ConvLayer)]
    if layer_name not in convs:
        raise ConfigError(f"unknown conv layer {layer_name!r}; available: {', '.join(convs)}")
    plane = _as_plane(image)
    c, size, _ = model.spec.input_shape
    x = window_input(plane, 0, 0, plane.shape[0], size) if plane.shape != (size, size) else plane[None, None]
    if c != 1:
        x = network.replicate_channels(x, c)
    idx = names.index(layer_name)
    ctx = network._Context(False)
    h = x
    for layer in model.layers[: idx + 1]:
        h = layer.forward(h, ctx)
    if idx + 1 < len(model.layers) and isinstance(model.layers[idx + 1], network.ReluLayer):
        h = relu_forward(h)
    return h[0]


def export_activation_maps(model, image, layer_name, out_dir, prefix=None):
    """Write one PGM and one warm-colour PPM per feature plane.

    Also writes ``index.csv`` listing planes by descending activation
    energy (a reviewing convenience only). Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    planes = layer_activations(model, image, layer_name)
    prefix = prefix or layer_name.replace("/", "_")
    written = []
    energy = []
    for k, plane in enumerate(planes):
        gray = normalize_plane(plane)
        g_path = out_dir / f"{prefix}_{k:03d}.pgm"
        c_path = out_dir / f"{prefix}_{k:03d}_warm.ppm"
        write_pgm(g_path, gray)
        write_ppm(c_path, colorize(gray))
        written += [g_path, c_path]
        energy.append(float(np.square(plane.astype(np.float64)).sum()))
    with open(out_dir / "index.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["rank", "plane", "energy", "gray", "warm"])
        for rank, k in enumerate(np.argsort(-np.array(energy), kind="stable")):
            out.writerow([rank, int(k), repr(energy[k]), f"{prefix}_{k:03d}.pgm", f"{prefix}_{k:03d}_warm.ppm"])
    return written
