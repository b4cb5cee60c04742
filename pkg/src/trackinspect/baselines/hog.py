"""Histogram of oriented gradients with unsigned, linearly interpolated orientation bins."""

from dataclasses import dataclass

import numpy as np

from .. import ShapeError

BLOCK_EPS = 1e-6
CLIP = 0.2


@dataclass(frozen=True)
class HogGeometry:
    window: tuple = (160, 160)
    cell: int = 8
    block: int = 2
    stride: int = 1  # in cells
    bins: int = 9

    @property
    def cells(self):
        return self.window[0] // self.cell, self.window[1] // self.cell

    @property
    def blocks(self):
        cy, cx = self.cells
        return (cy - self.block) // self.stride + 1, (cx - self.block) // self.stride + 1

    @property
    def dim(self):
        by, bx = self.blocks
        return by * bx * self.block * self.block * self.bins

    def validate(self):
        cy, cx = self.cells
        if self.cell < 1 or self.block < 1 or self.stride < 1 or self.bins < 1:
            raise ShapeError("HOG geometry values must be positive")
        if self.window[0] % self.cell or self.window[1] % self.cell:
            raise ShapeError(f"window {self.window} is not a multiple of the cell size {self.cell}")
        if cy < self.block or cx < self.block:
            raise ShapeError("window smaller than one block")


def gradients(img):
    """Centered differences with edge replication: (gx, gy)."""
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    return p[1:-1, 2:] - p[1:-1, :-2], p[2:, 1:-1] - p[:-2, 1:-1]


def cell_histograms(img, cell=8, bins=9):
    """(rows//cell, cols//cell, bins) magnitude-weighted orientation histograms.

    Orientation is unsigned (mod 180 deg); bin k is centered at k*180/bins and
    each pixel splits its vote linearly between the two nearest centers.
    """
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    t = (np.rad2deg(np.arctan2(gy, gx)) % 180.0) / (180.0 / bins)
    lo = np.floor(t).astype(int) % bins
    frac = t - np.floor(t)
    hi = (lo + 1) % bins
    votes = np.zeros(mag.shape + (bins,))
    rr, cc = np.indices(mag.shape)
    np.add.at(votes, (rr, cc, lo), mag * (1 - frac))
    np.add.at(votes, (rr, cc, hi), mag * frac)
    ny, nx = mag.shape[0] // cell, mag.shape[1] // cell
    return votes[:ny * cell, :nx * cell].reshape(ny, cell, nx, cell, bins).sum(axis=(1, 3))


def block_features(cells, block=2, stride=1):
    """(by, bx, block*block*bins) L2-Hys normalized blocks."""
    ny, nx, bins = cells.shape
    by, bx = (ny - block) // stride + 1, (nx - block) // stride + 1
    out = np.empty((by, bx, block, block, bins))
    for i in range(block):
        for j in range(block):
            out[:, :, i, j] = cells[i:i + stride * by:stride, j:j + stride * bx:stride]
    v = out.reshape(by, bx, -1)
    v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + BLOCK_EPS ** 2)
    v = np.minimum(v, CLIP)
    return v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + BLOCK_EPS ** 2)


def hog(patch, geometry=None):
    geometry = geometry or HogGeometry()
    geometry.validate()
    patch = np.asarray(patch)
    if patch.shape != tuple(geometry.window):
        raise ShapeError(f"patch {patch.shape} does not match HOG window {geometry.window}")
    cells = cell_histograms(patch, geometry.cell, geometry.bins)
    return block_features(cells, geometry.block, geometry.stride).ravel()


def hog_grid(window, geometry=None):
    """HOG descriptors of every template placement on the cell lattice of a larger window.

    The lattice is centered in the window. Returns (descriptors (P, dim),
    pixel centers (P, 2)), placements in row-major order.
    """
    geometry = geometry or HogGeometry()
    geometry.validate()
    window = np.asarray(window, dtype=np.float64)
    c = geometry.cell
    ny, nx = window.shape[0] // c, window.shape[1] // c
    ty, tx = geometry.cells
    if ny < ty or nx < tx or geometry.stride != 1:
        raise ShapeError(f"window {window.shape} cannot hold template {geometry.window}")
    oy, ox = (window.shape[0] - ny * c) // 2, (window.shape[1] - nx * c) // 2
    cells = cell_histograms(window[oy:oy + ny * c, ox:ox + nx * c], c, geometry.bins)
    blocks = block_features(cells, geometry.block, 1)
    by, bx = geometry.blocks
    feats, centers = [], []
    for i in range(ny - ty + 1):
        for j in range(nx - tx + 1):
            feats.append(blocks[i:i + by, j:j + bx].ravel())
            centers.append((oy + i * c + geometry.window[0] // 2, ox + j * c + geometry.window[1] // 2))
    return np.array(feats), np.array(centers)
