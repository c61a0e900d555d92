"""Flow visualization: the Middlebury color wheel and an arrow-grid overlay."""
import numpy as np
from PIL import Image, ImageDraw

from flowspike.errors import ShapeError

# hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel():
    """55 x 3 float table in [0, 255] built from piecewise-linear hue ramps."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    i = 0
    for n, fixed, ramp, up in ((ry, 0, 1, True), (yg, 1, 0, False), (gc, 1, 2, True),
                               (cb, 2, 1, False), (bm, 2, 0, True), (mr, 0, 2, False)):
        r = np.floor(255 * np.arange(n) / n)
        wheel[i:i + n, fixed] = 255
        wheel[i:i + n, ramp] = r if up else 255 - r
        i += n
    return wheel


_WHEEL = color_wheel()


def _check_flow(flow):
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be 2 x H x W, got {flow.shape}", dim="flow")
    return flow


def flow_to_rgb(flow, max_magnitude="auto"):
    """H x W x 3 uint8 image: hue is direction, saturation is magnitude / ``max_magnitude``."""
    flow = _check_flow(flow)
    u, v = np.nan_to_num(flow[0]), np.nan_to_num(flow[1])
    rad = np.hypot(u, v)
    if max_magnitude == "auto" or max_magnitude is None:
        max_magnitude = float(rad.max()) if rad.size else 0.0
    max_magnitude = float(max_magnitude)
    if max_magnitude < 0:
        raise ValueError("max_magnitude must be non-negative")
    scale = max_magnitude if max_magnitude > 0 else 1.0
    u, v, rad = u / scale, v / scale, rad / scale
    ncols = len(_WHEEL)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * _WHEEL[k0] + f * _WHEEL[k1]) / 255.0
    inside = (rad <= 1)[..., None]
    r = rad[..., None]
    col = np.where(inside, 1 - r * (1 - col), col * 0.75)
    return np.floor(255 * col).astype(np.uint8)


def cell_maxima(flow, cell=10):
    """For each ``cell`` x ``cell`` block: (centre x, centre y, u, v) of its largest vector."""
    flow = _check_flow(flow)
    if cell < 1:
        raise ValueError("cell must be >= 1")
    _, h, w = flow.shape
    mag = np.hypot(flow[0], flow[1])
    out = []
    for y0 in range(0, h, cell):
        for x0 in range(0, w, cell):
            block = mag[y0:y0 + cell, x0:x0 + cell]
            iy, ix = np.unravel_index(np.argmax(block), block.shape)
            if block[iy, ix] <= 0:
                continue
            cy = y0 + (block.shape[0] - 1) / 2
            cx = x0 + (block.shape[1] - 1) / 2
            out.append((cx, cy, float(flow[0, y0 + iy, x0 + ix]), float(flow[1, y0 + iy, x0 + ix])))
    return out


def arrow_grid_overlay(image, flow, cell=10, color=(0, 0, 0), scale=1.0):
    """Draw one arrow per cell showing its maximum-magnitude flow vector."""
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    flow = _check_flow(flow)
    if flow.shape[1:] != (img.height, img.width):
        raise ShapeError(f"flow {flow.shape[1:]} does not match image {(img.height, img.width)}",
                         dim="spatial")
    draw = ImageDraw.Draw(img)
    for cx, cy, u, v in cell_maxima(flow, cell):
        ex, ey = cx + scale * u, cy + scale * v
        draw.line([(cx, cy), (ex, ey)], fill=color, width=1)
        length = np.hypot(u, v) * scale
        if length > 0:
            # two short barbs at the tip
            ang = np.arctan2(v, u)
            head = min(3.0, 0.4 * length)
            for da in (2.6, -2.6):
                draw.line([(ex, ey), (ex + head * np.cos(ang + da), ey + head * np.sin(ang + da))],
                          fill=color, width=1)
    return np.asarray(img)


def save_png(image, path):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def render_flow(flow, path, max_magnitude="auto", arrows=None):
    img = flow_to_rgb(flow, max_magnitude)
    if arrows:
        img = arrow_grid_overlay(img, flow, cell=int(arrows))
    save_png(img, path)
    return img
