"""Procedural trackbed strips with exact ground truth.

Generation is split in two stages. ``sample_layout`` draws every discrete
decision (tie positions, materials, fastener classes and conditions, defect
placements, flags) from one RNG stream; ``render_strip`` turns a layout into
pixels and a label map using a second stream. Counting tests can therefore
sample thousands of layouts without paying for rendering.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .. import ConfigError
from ..imaging import FASTENER_CLASSES, FASTENER_WINDOW, MATERIAL_CLASSES, ImageStrip
from . import glyphs, textures

ROI_NAMES = ("left_field", "left_gage", "right_gage", "right_field")
CONCRETE = ("rough_concrete", "medium_concrete", "smooth_concrete")
BACKGROUND = len(FASTENER_CLASSES)
MAT = {name: i for i, name in enumerate(MATERIAL_CLASSES)}


@dataclass
class SceneSpec:
    height: int = 2048
    width: int = 824
    tie_pitch: int = 410
    tie_pitch_jitter: int = 16
    tie_height: int = 200
    tie_height_jitter: int = 8
    tie_left: int = 24
    tie_right: int = 800
    rail_centers: tuple = (250, 574)
    rail_width: int = 56
    roi_offset: int = 100
    tie_materials: dict = field(default_factory=lambda: {
        "rough_concrete": 0.3, "medium_concrete": 0.3, "smooth_concrete": 0.25, "wood": 0.15})
    fastener_mix: dict = field(default_factory=lambda: {
        "pr_clip": 0.25, "e_clip": 0.25, "fast_clip_a": 0.2, "fast_clip_b": 0.1, "c_clip": 0.1, "j_clip": 0.1})
    broken_rate: float = 0.05
    missing_rate: float = 0.03
    crumbling_rate: float = 0.12
    chipped_rate: float = 0.12
    severity_range: tuple = (0.03, 0.35)
    lubricator_rate: float = 0.1
    difficult_rate: float = 0.3
    difficult_strength: float = 0.5
    covered_rate: float = 0.02
    turnout_rate: float = 0.02
    noise_sigma: float = 3.0
    pose_jitter: int = 4
    pixel_pitch_mm: float = 0.86

    def validate(self):
        for name in ("broken_rate", "missing_rate", "crumbling_rate", "chipped_rate", "lubricator_rate",
                     "difficult_rate", "covered_rate", "turnout_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.broken_rate + self.missing_rate > 1:
            raise ConfigError("broken_rate + missing_rate exceeds 1")
        for mix_name in ("tie_materials", "fastener_mix"):
            mix = getattr(self, mix_name)
            if abs(sum(mix.values()) - 1) > 1e-9:
                raise ConfigError(f"{mix_name} must sum to 1")
        if not set(self.tie_materials) <= set(CONCRETE) | {"wood"}:
            raise ConfigError("tie materials must be concrete grades or wood")
        if not set(self.fastener_mix) <= {c for c in FASTENER_CLASSES if not c.endswith("_m")}:
            raise ConfigError("fastener mix lists unknown classes")
        if self.tie_height + 2 * self.tie_pitch_jitter > self.height or self.tie_right > self.width:
            raise ConfigError("tie geometry does not fit the strip")
        if self.height < FASTENER_WINDOW + 2 * 16 + self.tie_height // 2:
            raise ConfigError("strip too short to hold one tie with its fastener windows")
        lo, hi = self.severity_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("severity_range must satisfy 0 < lo <= hi <= 1")

    def roi_columns(self):
        a, b = self.rail_centers
        return (a - self.roi_offset, a + self.roi_offset, b - self.roi_offset, b + self.roi_offset)

    def to_dict(self):
        return asdict(self)


def _snap8(v):
    return int(8 * round(v / 8))


def _choice(rng, mix):
    names = list(mix)
    return names[int(rng.choice(len(names), p=np.array([mix[n] for n in names])))]


def sample_layout(spec, rng):
    """Discrete scene description: a list of tie dicts plus strip-level flags."""
    spec.validate()
    margin = FASTENER_WINDOW // 2 + 16
    ties = []
    center = int(rng.integers(margin, margin + spec.tie_pitch // 2 + 1))
    half = FASTENER_WINDOW // 2
    while center + margin <= spec.height:
        c = _snap8(center - half) + half  # ROI window tops on the trunk grid
        h = spec.tie_height + int(rng.integers(-spec.tie_height_jitter, spec.tie_height_jitter + 1))
        material = _choice(rng, spec.tie_materials)
        base = _choice(rng, spec.fastener_mix)
        rois = []
        for k, col in enumerate(spec.roi_columns()):
            name = base + "_m" if (k % 2 == 1 and base.removesuffix("_a").removesuffix("_b") in
                                   ("pr_clip", "e_clip", "c_clip", "j_clip")) else base
            u = rng.random()
            if u < spec.missing_rate:
                cls, cond = BACKGROUND, "missing"
            elif u < spec.missing_rate + spec.broken_rate:
                cls = FASTENER_CLASSES.index("broken_fast" if base.startswith("fast") else "broken_clip")
                cond = "broken"
            else:
                cls, cond = FASTENER_CLASSES.index(name), "good"
            top, left = c - half, _snap8(col - half)
            jr, jc = rng.integers(-spec.pose_jitter, spec.pose_jitter + 1, size=2)
            rois.append({"name": ROI_NAMES[k], "window": [top, left, top + FASTENER_WINDOW, left + FASTENER_WINDOW],
                         "class": int(cls), "condition": cond,
                         "glyph_center": [top + half + int(jr), left + half + int(jc)], "covered": False})
        defects = []
        if material != "wood":
            for kind, rate in (("crumbling", spec.crumbling_rate), ("chipped", spec.chipped_rate)):
                if rng.random() < rate:
                    defects.append({"type": kind, "target_severity": float(rng.uniform(*spec.severity_range)),
                                    "seed": int(rng.integers(2**31))})
        covered = rng.random() < spec.covered_rate
        if covered:
            rois[int(rng.integers(4))]["covered"] = True
        turnout = rng.random() < spec.turnout_rate
        lub = rng.random() < spec.lubricator_rate
        ties.append({"center": c, "height": h, "material": material, "base_class": base, "rois": rois,
                     "defects": defects, "covered": covered, "turnout": turnout, "lubricator": lub})
        center = c + spec.tie_pitch + int(rng.integers(-spec.tie_pitch_jitter, spec.tie_pitch_jitter + 1))
    return {"ties": ties, "difficult": bool(rng.random() < spec.difficult_rate),
            "gain": float(rng.uniform(0.75, 1.2))}


def _blob_mask(shape, area, rng):
    """Union of random ellipses with roughly ``area`` pixels inside ``shape``."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    rr, cc = np.mgrid[0:h, 0:w]
    n = int(rng.integers(2, 5))
    r_eff = np.sqrt(max(area, 16) / (np.pi * n)) * 1.15
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.1 * w, 0.9 * w)
    for _ in range(n):
        ay = r_eff * rng.uniform(0.6, 1.2)
        ax = r_eff * rng.uniform(0.9, 1.8)
        oy = cy + rng.normal(0, r_eff * 0.5)
        ox = cx + rng.normal(0, r_eff * 0.8)
        mask |= ((rr - oy) / ay) ** 2 + ((cc - ox) / ax) ** 2 <= 1
    return mask


def _paste(img, labels, mask, top, left, tex, label):
    """Write tex/label into img/labels where mask is set; mask is clipped to the image."""
    h, w = img.shape
    mh, mw = mask.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + mh, h), min(left + mw, w)
    if r0 >= r1 or c0 >= c1:
        return
    m = mask[r0 - top:r1 - top, c0 - left:c1 - left]
    t = tex[r0 - top:r1 - top, c0 - left:c1 - left] if np.ndim(tex) else tex
    view = img[r0:r1, c0:c1]
    view[m] = t[m] if np.ndim(t) else t
    if label is not None:
        labels[r0:r1, c0:c1][m] = label


def render_strip(spec, layout, rng, strip_id="strip", mile_id="0", origin=0):
    """Render a layout. Returns (ImageStrip with 8-bit-valued pixels, GroundTruth)."""
    h, w = spec.height, spec.width
    img = textures.texture("ballast", (h, w), rng)
    labels = np.full((h, w), MAT["ballast"], dtype=np.uint8)
    tie_boxes = []
    for tie in layout["ties"]:
        top = tie["center"] - tie["height"] // 2
        box = (top, spec.tie_left, top + tie["height"], spec.tie_right)
        tie_boxes.append(box)
        shape = (box[2] - box[0], box[3] - box[1])
        _paste(img, labels, np.ones(shape, bool), box[0], box[1],
               textures.texture(tie["material"], shape, rng), MAT[tie["material"]])
        for d in tie["defects"]:
            drng = np.random.default_rng(d["seed"])
            inspect_area = shape[0] * shape[1] - spec.rail_width * shape[0] * len(spec.rail_centers)
            mask = _blob_mask(shape, d["target_severity"] * inspect_area, drng)
            _paste(img, labels, mask, box[0], box[1], textures.texture(d["type"], shape, drng), MAT[d["type"]])
        if tie["lubricator"]:
            gap_top = box[2] + 40
            if gap_top + 120 < h:
                rail_c = spec.rail_centers[int(rng.integers(len(spec.rail_centers)))]
                left = rail_c + spec.rail_width // 2 + 4
                _paste(img, labels, np.ones((120, 64), bool), gap_top, left,
                       textures.texture("lubricator", (120, 64), rng), MAT["lubricator"])

    for rc in spec.rail_centers:
        left = rc - spec.rail_width // 2
        _paste(img, labels, np.ones((h, spec.rail_width), bool), 0, left,
               textures.texture("rail", (h, spec.rail_width), rng), MAT["rail"])

    for tie, box in zip(layout["ties"], tie_boxes):
        if tie["turnout"]:
            mid = (spec.rail_centers[0] + spec.rail_centers[1]) // 2
            _paste(img, labels, np.ones((box[2] - box[0] + 80, 40), bool), box[0] - 40, mid - 20,
                   textures.texture("rail", (box[2] - box[0] + 80, 40), rng), MAT["rail"])
        for roi in tie["rois"]:
            _render_fastener(img, labels, roi, rng)
            if roi["covered"]:
                cy, cx = roi["glyph_center"]
                mask = _blob_mask((150, 150), 0.55 * 150 * 150, rng)
                _paste(img, labels, mask, cy - 75, cx - 75, textures.texture("ballast", (150, 150), rng),
                       MAT["ballast"])

    if layout["difficult"]:
        img = img * textures.gain_field((h, w), rng, spec.difficult_strength)
    cols = (np.arange(w) - w / 2) / (w / 2)
    img = img * layout["gain"] * (1 - 0.25 * cols ** 2)[None, :]
    img = img + spec.noise_sigma * rng.standard_normal((h, w))
    pixels = np.clip(np.rint(img), 0, 255)

    truth = build_truth(spec, layout, labels, tie_boxes, strip_id, mile_id)
    return ImageStrip(pixels, spec.pixel_pitch_mm, origin, mile_id, strip_id), truth


def _render_fastener(img, labels, roi, rng):
    cy, cx = roi["glyph_center"]
    top, left = cy - glyphs.CANVAS // 2, cx - glyphs.CANVAS // 2
    shape = (glyphs.CANVAS, glyphs.CANVAS)
    if roi["condition"] == "missing":
        _paste(img, labels, glyphs.hole_mask(), top, left, 25.0, None)
        return
    name = FASTENER_CLASSES[roi["class"]]
    plate = glyphs.plate_mask()
    _paste(img, labels, plate, top, left, 120 + 10 * rng.standard_normal(shape), MAT["fastener"])
    clip = glyphs.clip_mask(name)
    outline = ndi.binary_dilation(clip, iterations=2) & ~clip
    _paste(img, labels, outline, top, left, 45.0, MAT["fastener"])
    _paste(img, labels, clip, top, left, textures.texture("fastener", shape, rng), MAT["fastener"])


INSPECTABLE = {MAT[n] for n in CONCRETE + ("wood", "crumbling", "chipped")}


def _segment_counts(labels, box):
    sub = labels[box[0]:box[2], box[1]:box[3]]
    inspect = np.isin(sub, list(INSPECTABLE))
    return {"inspectable": int(inspect.sum()),
            "crumbling": int((sub == MAT["crumbling"]).sum()),
            "chipped": int((sub == MAT["chipped"]).sum())}


def build_truth(spec, layout, labels, tie_boxes, strip_id, mile_id, n_segments=4):
    ties = []
    for k, (tie, box) in enumerate(zip(layout["ties"], tie_boxes)):
        counts = _segment_counts(labels, box)
        edges = np.linspace(box[1], box[3], n_segments + 1).astype(int)
        segments = []
        for s in range(n_segments):
            sbox = [box[0], int(edges[s]), box[2], int(edges[s + 1])]
            segments.append({"box": sbox, **_segment_counts(labels, sbox)})
        defects = []
        for kind in ("crumbling", "chipped"):
            if counts[kind]:
                defects.append({"type": kind, "pixels": counts[kind],
                                "severity": counts[kind] / counts["inspectable"]})
        rois = []
        for roi in tie["rois"]:
            cy, cx = roi["glyph_center"]
            half = glyphs.CANVAS // 2
            p = glyphs.PLATE
            gbox = [cy - half + p[1], cx - half + p[0], cy - half + p[3] + 1, cx - half + p[2] + 1]
            rois.append({"name": roi["name"], "window": roi["window"], "class": roi["class"],
                         "class_name": FASTENER_CLASSES[roi["class"]] if roi["class"] < BACKGROUND else "background",
                         "condition": roi["condition"], "glyph_box": gbox, "covered": roi["covered"]})
        ties.append({
            "tie_id": f"{strip_id}:{k}", "box": [int(v) for v in box], "material": tie["material"],
            "flags": {"turnout": tie["turnout"], "covered": tie["covered"], "uninspectable": tie["covered"]},
            "rois": rois, "defects": defects, "inspectable_pixels": counts["inspectable"],
            "segments": segments,
        })
    return GroundTruth(labels, ties, layout["difficult"], strip_id, mile_id)


@dataclass
class GroundTruth:
    label_map: np.ndarray
    ties: list
    difficult: bool = False
    strip_id: str = "strip"
    mile_id: str = "0"


def generate_strip(spec, seed, strip_id="strip", mile_id="0", origin=0):
    """Deterministic (ImageStrip, GroundTruth) for a (spec, seed) pair."""
    layout = sample_layout(spec, np.random.default_rng([seed, 0]))
    return render_strip(spec, layout, np.random.default_rng([seed, 1]), strip_id, mile_id, origin)
