"""Fully convolutional inference over strips and fastener windows."""

from dataclasses import dataclass

import numpy as np

from .. import ShapeError
from .model import FASTENER_WINDOW, MATERIAL_PATCH, map_size

MAP_STRIDE = 16
TRUNK_STRIDE = 8


@dataclass
class ScoreMaps:
    """Material scores (channels, rows, cols); site (i, j) sees strip pixels
    [origin + stride*i, origin + stride*i + 75) along each axis."""
    scores: np.ndarray
    stride: int = MAP_STRIDE
    origin: tuple = (0, 0)
    field: int = MATERIAL_PATCH

    @property
    def shape(self):
        return self.scores.shape

    def site_box(self, i, j):
        r0 = self.origin[0] + self.stride * i
        c0 = self.origin[1] + self.stride * j
        return r0, c0, r0 + self.field, c0 + self.field

    def site_centers(self):
        half = self.field // 2
        rows = self.origin[0] + self.stride * np.arange(self.scores.shape[1]) + half
        cols = self.origin[1] + self.stride * np.arange(self.scores.shape[2]) + half
        return rows, cols


def infer_scoremaps(model, pixels, tile_rows=48):
    """Material score maps for a normalized 2-D image (dropout off).

    The image is processed in row tiles whose offsets are multiples of 16, so
    the tiled result equals a single pass bit-for-bit in exact arithmetic.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    if h < MATERIAL_PATCH or w < MATERIAL_PATCH:
        raise ShapeError(f"input {h}x{w} smaller than the 75x75 receptive field")
    out_h, out_w = map_size(h), map_size(w)
    scores = np.empty((model.cfg.n_material, out_h, out_w), dtype=model.dtype)
    for start in range(0, out_h, tile_rows):
        n = min(tile_rows, out_h - start)
        r0 = start * MAP_STRIDE
        tile = pixels[r0:r0 + MAP_STRIDE * (n - 1) + MATERIAL_PATCH]
        x = tile[None, None].astype(model.dtype)
        scores[:, start:start + n] = model.material_scores(x)[0, :, :n, :out_w]
    return ScoreMaps(scores)


def segment(maps):
    """Per-site argmax over material channels; ties go to the lowest class index."""
    s = maps.scores if isinstance(maps, ScoreMaps) else np.asarray(maps)
    return np.argmax(s, axis=0)


def infer_fastener_features(model, window):
    """Conv4_f grid for one window of at least 182x182 pixels.

    Returns (features (F, gh, gw), svm scores (K, gh, gw), coarse logits (5,)).
    """
    window = np.asarray(window)
    if window.shape[0] < FASTENER_WINDOW or window.shape[1] < FASTENER_WINDOW:
        raise ShapeError(f"fastener window {window.shape} smaller than {FASTENER_WINDOW}x{FASTENER_WINDOW}")
    feats, svm, logits = model.fastener_outputs(window[None, None].astype(model.dtype))
    return feats[0], svm[0], logits[0]


def roi_features(model, pixels, rois, band_rows=FASTENER_WINDOW):
    """Features for many 182x182 ROI windows of one strip.

    ``rois`` is a list of (top, left) with both coordinates multiples of 8;
    ROIs sharing a top row reuse one trunk pass over that band of rows.
    Returns a list of (features, svm scores) aligned with ``rois``.
    """
    out = [None] * len(rois)
    by_top = {}
    for idx, (top, left) in enumerate(rois):
        if top % TRUNK_STRIDE or left % TRUNK_STRIDE:
            raise ShapeError("ROI corners must be multiples of the trunk stride (8)")
        by_top.setdefault(top, []).append((idx, left))
    h, w = pixels.shape
    for top, items in by_top.items():
        if top < 0 or top + band_rows > h:
            raise ShapeError(f"ROI band at row {top} leaves the strip")
        band = pixels[top:top + band_rows][None, None].astype(model.dtype)
        f3, _ = model.trunk_forward(band)
        span = (FASTENER_WINDOW - 43) // TRUNK_STRIDE + 1  # conv3 cells per window (18)
        for idx, left in items:
            if left < 0 or left + FASTENER_WINDOW > w:
                raise ShapeError(f"ROI at column {left} leaves the strip")
            c0 = left // TRUNK_STRIDE
            sub = f3[:, :, :, c0:c0 + span]
            feats, _ = model.fastener_features(sub)
            out[idx] = (feats[0], model.svm_scores(feats)[0])
    return out
