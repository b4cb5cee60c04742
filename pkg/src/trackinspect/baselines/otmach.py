"""OT-MACH correlation filters designed per frequency, plus HOG-space mean filters."""

import warnings
from dataclasses import dataclass

import numpy as np

from .. import ConfigError, DataError, ShapeError
from ..netcore import load_checkpoint, save_checkpoint
from .hog import HogGeometry, hog, hog_grid

DENOM_FLOOR = 1e-12


class DesignError(DataError):
    """The filter equation has no solution for the given samples."""


class DesignWarning(UserWarning):
    pass


def intensity_normalize(patch):
    """Zero mean, unit L2 norm."""
    x = np.asarray(patch, dtype=np.float64)
    x = x - x.mean()
    n = np.linalg.norm(x)
    if n == 0 or not np.isfinite(n):
        raise DataError("cannot normalize a constant patch")
    return x / n


@dataclass(frozen=True)
class MachFilter:
    coeffs: np.ndarray  # complex, same shape as the training samples
    alpha: float
    label: int = -1

    def __post_init__(self):
        if not np.all(np.isfinite(self.coeffs)):
            raise DesignError("filter has non-finite coefficients")

    @property
    def template(self):
        """Spatial-domain filter (real because the spectrum is Hermitian)."""
        return np.real(np.fft.ifft2(self.coeffs))


@dataclass(frozen=True)
class HogFilter:
    h: np.ndarray
    geometry: HogGeometry
    label: int = -1


def otmach_design(samples, alpha=0.95, label=-1, normalize=True):
    """h(f) = mean X(f) / (alpha + (1 - alpha) * mean |X(f)|^2).

    With a diagonal spectral-energy matrix the regularized solve is a scalar
    division per frequency. Denominators below 1e-12 are floored with a
    warning; an exactly zero denominator is a design error.
    """
    if not 0 <= alpha <= 1:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise DataError("OT-MACH design needs at least one sample")
    if any(s.shape != samples[0].shape or s.ndim != 2 for s in samples):
        raise ShapeError("samples must be equally sized 2-D arrays")
    if normalize:
        samples = [intensity_normalize(s) for s in samples]
    X = np.fft.fft2(np.stack(samples))
    mean = X.mean(axis=0)
    den = alpha + (1 - alpha) * np.mean(np.abs(X) ** 2, axis=0)
    if np.any(den == 0):
        raise DesignError("zero denominator: empty spectrum at some frequency with alpha = 0")
    if np.any(den < DENOM_FLOOR):
        warnings.warn("spectral energy underflow; denominator floored", DesignWarning, stacklevel=2)
        den = np.maximum(den, DENOM_FLOOR)
    return MachFilter(mean / den, float(alpha), int(label))


def otmach_hog_design(samples, geometry=None, label=-1):
    """In HOG space the filter reduces to the mean descriptor."""
    geometry = geometry or HogGeometry()
    feats = [hog(s, geometry) for s in samples]
    if not feats:
        raise DataError("HOG filter design needs at least one sample")
    return HogFilter(np.mean(feats, axis=0), geometry, int(label))


@dataclass
class Correlation:
    score: float
    location: tuple  # window pixel under the filter center
    response: np.ndarray  # valid placements


def response_map(template, window):
    """Cross-correlation over placements that keep the template inside the window.

    r[dy, dx] = sum_{u,v} t[u, v] * w[dy + u, dx + v], evaluated with FFTs.
    """
    window = np.asarray(window, dtype=np.float64)
    th, tw = template.shape
    H, W = window.shape
    if th > H or tw > W:
        raise ShapeError(f"template {template.shape} larger than window {window.shape}")
    T = np.fft.fft2(template, s=(H, W))
    r = np.real(np.fft.ifft2(np.conj(T) * np.fft.fft2(window)))
    return r[:H - th + 1, :W - tw + 1]


def correlate(filt, window):
    """Peak response of a filter over a window and its location."""
    if isinstance(filt, HogFilter):
        feats, centers = hog_grid(window, filt.geometry)
        r = feats @ filt.h
        k = int(np.argmax(r))
        return Correlation(float(r[k]), tuple(int(v) for v in centers[k]), r)
    t = filt.template
    r = response_map(t, window)
    k = np.unravel_index(int(np.argmax(r)), r.shape)
    return Correlation(float(r[k]), (int(k[0]) + t.shape[0] // 2, int(k[1]) + t.shape[1] // 2), r)


def filter_responses(filters, window):
    """(C, P) responses of every filter at every placement."""
    if not filters:
        raise ConfigError("no filters")
    if isinstance(filters[0], HogFilter):
        feats, _ = hog_grid(window, filters[0].geometry)
        return np.stack([f.h for f in filters]) @ feats.T
    return np.stack([correlate(f, window).response.ravel() for f in filters])


def baseline_scores(filters, window):
    """Per-placement (B, F) grids with b_c = h_c and f_c = h_c - sum_{i != c} h_i / (C - 1).

    Correlation is linear in the filter, so the combined filters' responses
    are combinations of the individual response maps.
    """
    if len(filters) < 2:
        raise ConfigError("need at least two class filters")
    B = filter_responses(filters, window)
    C = B.shape[0]
    F = B - (B.sum(axis=0, keepdims=True) - B) / (C - 1)
    return B, F


def save_filters(path, filters):
    tensors = {}
    for f in filters:
        if isinstance(f, HogFilter):
            tensors[f"hog/{f.label:03d}"] = f.h
        else:
            tensors[f"mach/{f.label:03d}"] = f.coeffs
    meta = {"alpha": {str(f.label): getattr(f, "alpha", None) for f in filters}}
    if filters and isinstance(filters[0], HogFilter):
        g = filters[0].geometry
        meta["hog"] = {"window": list(g.window), "cell": g.cell, "block": g.block, "stride": g.stride, "bins": g.bins}
    save_checkpoint(path, tensors, {"kind": "filters"}, meta)


def load_filters(path):
    tensors, meta, _ = load_checkpoint(path, {"kind": "filters"})
    out = []
    for name in sorted(tensors):
        kind, label = name.split("/")
        if kind == "hog":
            g = meta["hog"]
            geom = HogGeometry(tuple(g["window"]), g["cell"], g["block"], g["stride"], g["bins"])
            out.append(HogFilter(tensors[name].astype(np.float64), geom, int(label)))
        else:
            out.append(MachFilter(tensors[name].astype(np.complex128), meta["alpha"][str(int(label))], int(label)))
    return out
