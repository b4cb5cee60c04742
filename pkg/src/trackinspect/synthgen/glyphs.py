"""Vector stencils for fastener glyphs, rasterized with PIL.

Stencils live on a 120x120 canvas centered at (60, 60); x runs across the
track, y along it. Mirrored categories are the horizontal flip of their base
stencil, so a class and its mirror render as exact left-right flips.
"""

import numpy as np
from PIL import Image, ImageDraw

CANVAS = 120
PLATE = (22, 14, 98, 106)  # x0, y0, x1, y1 of the tie plate / shoulder


def _pr(d):
    d.rectangle((34, 22, 48, 98), fill=1)
    d.ellipse((42, 26, 90, 66), outline=1, width=12)


def _e(d):
    d.arc((28, 24, 92, 96), start=40, end=330, fill=1, width=13)
    d.rectangle((30, 54, 90, 66), fill=1)


def _fast_a(d):
    d.rectangle((34, 26, 86, 94), outline=1, width=12)


def _fast_b(d):
    d.polygon((60, 20, 100, 60, 60, 100, 20, 60), outline=1, width=12)
    d.rectangle((54, 54, 66, 66), fill=1)


def _c(d):
    d.arc((26, 26, 94, 94), start=45, end=315, fill=1, width=15)


def _j(d):
    d.rectangle((70, 20, 84, 82), fill=1)
    d.arc((34, 52, 84, 100), start=0, end=180, fill=1, width=14)


def _broken_fast(d):
    d.rectangle((34, 26, 46, 94), fill=1)
    d.rectangle((74, 26, 86, 94), fill=1)
    d.rectangle((50, 42, 56, 50), fill=1)
    d.rectangle((64, 70, 70, 78), fill=1)


def _broken_clip(d):
    d.line((36, 30, 54, 58), fill=1, width=12)
    d.line((84, 30, 66, 58), fill=1, width=12)
    d.rectangle((52, 80, 68, 92), fill=1)


BASE_STENCILS = {
    "pr_clip": _pr, "e_clip": _e, "fast_clip_a": _fast_a, "fast_clip_b": _fast_b,
    "c_clip": _c, "j_clip": _j, "broken_fast": _broken_fast, "broken_clip": _broken_clip,
}


def _raster(draw_fn):
    img = Image.new("L", (CANVAS, CANVAS), 0)
    draw_fn(ImageDraw.Draw(img))
    return np.asarray(img, dtype=bool)


SYMMETRIC = ("fast_clip_a", "fast_clip_b", "broken_fast", "broken_clip")
_CACHE = {}


def clip_mask(name):
    """Boolean clip stencil for a fastener class name (``*_m`` = mirrored)."""
    if name not in _CACHE:
        base = name.removesuffix("_m")
        mask = _raster(BASE_STENCILS[base])
        if base in SYMMETRIC:
            mask = mask | mask[:, ::-1]
        _CACHE[name] = mask[:, ::-1].copy() if name.endswith("_m") else mask
    return _CACHE[name]


def plate_mask():
    if "plate" not in _CACHE:
        m = _raster(lambda d: d.rectangle(PLATE, fill=1))
        _CACHE["plate"] = m | m[:, ::-1]
    return _CACHE["plate"]


def hole_mask():
    if "hole" not in _CACHE:
        m = _raster(lambda d: d.ellipse((50, 50, 70, 70), fill=1))
        _CACHE["hole"] = m | m[:, ::-1]
    return _CACHE["hole"]
