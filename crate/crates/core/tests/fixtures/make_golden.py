"""Regenerates the preprocessing golden fixture.

Writes `golden_input.png` (a deterministic 61x47 RGB pattern) and
`golden_input.f32` (its 3x84x84 preprocessed tensor, little-endian f32,
channel-major) computed with numpy in float64 and cast once at the end:
bilinear resize with half-pixel centres and edge clamping, then
`(v / 255 - mean) / std` with the large-image-corpus channel constants.
"""
import os

import numpy as np
from PIL import Image

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = 84
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


def pattern(w=61, h=47):
    y, x = np.mgrid[0:h, 0:w]
    r = (x * 37 + y * 11) % 256
    g = (x * x + 3 * y) % 256
    b = ((x ^ y) * 29) % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def taps(out, inp):
    scale = inp / out
    res = []
    for o in range(out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), float(inp - 1))
        lo = int(np.floor(src))
        hi = min(lo + 1, inp - 1)
        res.append((lo, hi, src - lo))
    return res


def preprocess(img):
    h, w, _ = img.shape
    xs, ys = taps(OUT, w), taps(OUT, h)
    px = img.astype(np.float64)
    out = np.zeros((3, OUT, OUT), dtype=np.float64)
    for c in range(3):
        for oy, (y0, y1, fy) in enumerate(ys):
            for ox, (x0, x1, fx) in enumerate(xs):
                top = (1.0 - fx) * px[y0, x0, c] + fx * px[y0, x1, c]
                bottom = (1.0 - fx) * px[y1, x0, c] + fx * px[y1, x1, c]
                v = (1.0 - fy) * top + fy * bottom
                out[c, oy, ox] = (v / 255.0 - MEAN[c]) / STD[c]
    return out.astype("<f4")


if __name__ == "__main__":
    img = pattern()
    Image.fromarray(img, "RGB").save(os.path.join(HERE, "golden_input.png"))
    decoded = np.asarray(Image.open(os.path.join(HERE, "golden_input.png")).convert("RGB"))
    assert (decoded == img).all()
    preprocess(decoded).tofile(os.path.join(HERE, "golden_input.f32"))
