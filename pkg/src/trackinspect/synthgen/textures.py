"""Seeded band-limited noise textures, one recipe per material class."""

import numpy as np
from scipy import ndimage as ndi


def _noise(shape, rng, sigma):
    n = rng.standard_normal(shape)
    if np.isscalar(sigma) and sigma <= 0:
        return n
    f = ndi.gaussian_filter(n, sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def ballast(shape, rng):
    # rounded stones separated by dark voids
    stones = _noise(shape, rng, 4.0)
    grain = _noise(shape, rng, 0.7)
    body = np.where(stones > -0.3, 105 + 28 * stones, 35 + 10 * stones)
    return body + 10 * grain


def wood(shape, rng):
    grain = _noise(shape, rng, (0.8, 18.0))
    knots = _noise(shape, rng, 6.0)
    return 85 + 22 * grain + 8 * knots + 4 * _noise(shape, rng, 0.5)


def rough_concrete(shape, rng):
    return 150 + 26 * _noise(shape, rng, 0.6) + 6 * _noise(shape, rng, 5.0)


def medium_concrete(shape, rng):
    return 155 + 15 * _noise(shape, rng, 1.6) + 5 * _noise(shape, rng, 6.0)


def smooth_concrete(shape, rng):
    return 160 + 4 * _noise(shape, rng, 0.8) + 4 * _noise(shape, rng, 8.0)


def crumbling(shape, rng):
    # exposed aggregate: bright chunks and deep dark pits
    chunks = _noise(shape, rng, 1.8)
    pits = chunks < -0.4
    return np.where(pits, 30 + 8 * chunks, 175 + 30 * chunks) + 6 * _noise(shape, rng, 0.5)


def chipped(shape, rng):
    # recessed fracture surface with conchoidal ridges
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    angle = rng.uniform(0, np.pi)
    ridges = np.sin((rr * np.cos(angle) + cc * np.sin(angle)) / 3.0 + 2 * _noise(shape, rng, 4.0))
    return 95 + 35 * ridges + 6 * _noise(shape, rng, 0.8)


def lubricator(shape, rng):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    phase = rng.uniform(0, 2 * np.pi, size=2)
    grid = np.sign(np.sin(2 * np.pi * rr / 10 + phase[0])) * np.sign(np.sin(2 * np.pi * cc / 10 + phase[1]))
    return 70 + 35 * grid + 5 * _noise(shape, rng, 0.8)


def rail(shape, rng):
    streaks = _noise(shape, rng, (25.0, 1.0))
    return 215 + 10 * streaks + 3 * _noise(shape, rng, 0.5)


def metal(shape, rng):
    return 205 + 8 * _noise(shape, rng, 1.0)


RECIPES = {
    "ballast": ballast, "wood": wood, "rough_concrete": rough_concrete,
    "medium_concrete": medium_concrete, "smooth_concrete": smooth_concrete,
    "crumbling": crumbling, "chipped": chipped, "lubricator": lubricator, "rail": rail,
    "fastener": metal,
}


def texture(name, shape, rng):
    return RECIPES[name](tuple(int(s) for s in shape), rng)


def gain_field(shape, rng, strength=0.5, scale=60.0):
    """Smooth multiplicative field in [1 - strength, 1] (grease / mud analogue)."""
    coarse = rng.random((max(2, int(shape[0] / scale) + 2), max(2, int(shape[1] / scale) + 2)))
    rows = np.linspace(0, coarse.shape[0] - 1.001, shape[0])
    cols = np.linspace(0, coarse.shape[1] - 1.001, shape[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    field = ndi.map_coordinates(coarse, [rr, cc], order=3, mode="nearest")
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return 1.0 - strength * field
