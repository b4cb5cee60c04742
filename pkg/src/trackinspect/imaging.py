"""Image strips, class catalog, illumination normalization, and patch augmentation."""

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from . import DataError, ShapeError

MATERIAL_PATCH = 75  # material classifier input side
FASTENER_WINDOW = 182  # fastener ROI window side

MATERIAL_CLASSES = (
    "ballast", "wood", "rough_concrete", "medium_concrete", "smooth_concrete",
    "crumbling", "chipped", "lubricator", "rail", "fastener",
)
MATERIAL_DEFECTS = ("crumbling", "chipped")

# Twelve object categories: eight real ones plus four mirrored copies of the
# non-symmetric clips. Index len(FASTENER_CLASSES) is the background/missing class.
FASTENER_CLASSES = (
    "pr_clip", "e_clip", "fast_clip_a", "fast_clip_b", "c_clip", "j_clip",
    "pr_clip_m", "e_clip_m", "c_clip_m", "j_clip_m", "broken_fast", "broken_clip",
)
BROKEN_CLASSES = ("broken_fast", "broken_clip")
COARSE_CLASSES = ("missing_or_broken", "pr_clip", "e_clip", "fast_clip", "other")


@dataclass(frozen=True)
class ClassCatalog:
    material: tuple = MATERIAL_CLASSES
    material_defects: tuple = MATERIAL_DEFECTS
    fastener: tuple = FASTENER_CLASSES
    broken: tuple = BROKEN_CLASSES
    coarse: tuple = COARSE_CLASSES
    mirror_pairs: tuple = (("pr_clip", "pr_clip_m"), ("e_clip", "e_clip_m"),
                           ("c_clip", "c_clip_m"), ("j_clip", "j_clip_m"))
    n_svm_outputs: int = 32

    def __post_init__(self):
        if not set(self.broken) <= set(self.fastener):
            raise ValueError("broken classes must be fastener classes")
        if len(self.good) == 0 or len(self.broken) == 0:
            raise ValueError("catalog needs at least one good and one broken class")
        if self.n_svm_outputs < 2 * len(self.fastener):
            raise ValueError(f"need >= {2 * len(self.fastener)} SVM outputs for a b/f pair per class")

    @property
    def background(self):
        return len(self.fastener)

    @property
    def good(self):
        return tuple(c for c in self.fastener if c not in self.broken)

    @property
    def good_ids(self):
        return [self.fastener.index(c) for c in self.good]

    @property
    def broken_ids(self):
        return [self.fastener.index(c) for c in self.broken]

    @property
    def defect_material_ids(self):
        return [self.material.index(c) for c in self.material_defects]

    def mirror_class(self, label):
        """Class id seen after a horizontal flip; an involution on all ids."""
        name = self.fastener[label] if label < len(self.fastener) else None
        for a, b in self.mirror_pairs:
            if name == a:
                return self.fastener.index(b)
            if name == b:
                return self.fastener.index(a)
        return label

    def is_symmetric(self, label):
        return self.mirror_class(label) == label

    def coarse_class(self, label):
        if label == self.background or self.fastener[label] in self.broken:
            return 0
        name = self.fastener[label].removesuffix("_m")
        if name == "pr_clip":
            return 1
        if name == "e_clip":
            return 2
        if name.startswith("fast_clip"):
            return 3
        return 4

    def svm_head(self, label, kind):
        """Output index of the class-vs-background ('b') or class-vs-rest ('f') SVM."""
        return 2 * label + (0 if kind == "b" else 1)


@dataclass
class ImageStrip:
    pixels: np.ndarray
    pixel_pitch_mm: float = 0.86
    origin: int = 0
    mile_id: str = "0"
    strip_id: str = "strip"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ShapeError("strip must be a non-empty 2-D grid")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("strip contains non-finite pixels")
        if self.pixel_pitch_mm <= 0:
            raise ValueError("pixel pitch must be positive")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class Patch:
    pixels: np.ndarray
    source: tuple = ("", 0, 0)
    label: int = None
    kind: str = "material"  # or "fastener"


def _envelope(pixels, sigma, median_window, decimation):
    if decimation <= 1:
        med = ndi.median_filter(pixels, size=median_window, mode="reflect")
        return ndi.gaussian_filter(med, sigma, mode="reflect")
    d = int(decimation)
    coarse = pixels[d // 2::d, d // 2::d]
    win = max(1, int(round(median_window / d)))
    env = ndi.gaussian_filter(ndi.median_filter(coarse, size=win, mode="reflect"), sigma / d, mode="reflect")
    rows = (np.arange(pixels.shape[0]) - d // 2) / d
    cols = (np.arange(pixels.shape[1]) - d // 2) / d
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndi.map_coordinates(env, [rr, cc], order=1, mode="nearest")


def gain_normalize(strip, envelope_sigma=32.0, target_level=100.0, median_window=31,
                   decimation=1, floor=1.0):
    """Divide out the slowly varying illumination envelope.

    The envelope is a median filter followed by a Gaussian blur, clamped below
    at ``floor``. ``decimation > 1`` estimates the envelope on a subsampled
    grid and interpolates it back, which is much cheaper on full strips.
    """
    if envelope_sigma <= 0 or target_level <= 0:
        raise ValueError("envelope_sigma and target_level must be positive")
    px = strip.pixels
    if not np.all(np.isfinite(px)):
        raise DataError("strip contains non-finite pixels")
    env = np.maximum(_envelope(px, envelope_sigma, median_window, decimation), floor)
    return replace(strip, pixels=px * (target_level / env))


def subtract_mean(strip, dataset_mean):
    if not np.isfinite(dataset_mean):
        raise ValueError("dataset mean must be finite")
    return replace(strip, pixels=strip.pixels - dataset_mean)


def crop_patch(strip, center, side, jitter=0, rng=None, label=None, kind="material"):
    """Crop a side x side patch around ``center`` (row, col), jittered uniformly by +-jitter.

    Raises ShapeError if the worst-case jittered crop leaves the strip.
    """
    r, c = center
    top = r - side // 2
    left = c - side // 2
    h, w = strip.shape
    if top - jitter < 0 or left - jitter < 0 or top + side + jitter > h or left + side + jitter > w:
        raise ShapeError(f"crop of side {side} (+-{jitter}) at {center} leaves {h}x{w} strip")
    if jitter:
        dr, dc = rng.integers(-jitter, jitter + 1, size=2)
        top += int(dr)
        left += int(dc)
    pix = strip.pixels[top:top + side, left:left + side].copy()
    return Patch(pix, (strip.strip_id, top, left), label, kind)


def mirror(patch, axis, catalog=None):
    """Flip a patch. Horizontal flips remap non-symmetric fastener labels."""
    if axis == "horizontal":
        pix = patch.pixels[..., ::-1]
    elif axis == "vertical":
        pix = patch.pixels[..., ::-1, :]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    label = patch.label
    if axis == "horizontal" and patch.kind == "fastener" and label is not None:
        label = (catalog or ClassCatalog()).mirror_class(label)
    return replace(patch, pixels=pix.copy(), label=label)


# -- file I/O -----------------------------------------------------------------

def write_image(path, pixels):
    """Write an 8-bit grayscale PGM or PNG (by suffix); values are clipped to [0, 255]."""
    img = Image.fromarray(np.clip(np.rint(pixels), 0, 255).astype(np.uint8), mode="L")
    img.save(path)


def read_image(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


def write_sidecar(path, strip):
    lines = [f"strip_id = {strip.strip_id}", f"mile_id = {strip.mile_id}",
             f"origin = {strip.origin}", f"pixel_pitch_mm = {strip.pixel_pitch_mm!r}",
             f"height = {strip.shape[0]}", f"width = {strip.shape[1]}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"([A-Za-z_]\w*)\s*=\s*(.*)", line)
        if not m:
            raise DataError(f"{path}: bad sidecar line {line!r}")
        meta[m.group(1)] = m.group(2).strip()
    return meta


def load_strip(image_path, sidecar_path=None):
    pixels = read_image(image_path)
    sidecar_path = sidecar_path or Path(image_path).with_suffix(".meta")
    meta = read_sidecar(sidecar_path) if Path(sidecar_path).exists() else {}
    return ImageStrip(pixels, float(meta.get("pixel_pitch_mm", 0.86)), int(meta.get("origin", 0)),
                      meta.get("mile_id", "0"), meta.get("strip_id", Path(image_path).stem))


def save_strip(image_path, strip):
    write_image(image_path, strip.pixels)
    write_sidecar(Path(image_path).with_suffix(".meta"), strip)
