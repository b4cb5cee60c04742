"""Datasets on disk: strips, ground-truth sidecars, manifests, and patch extraction."""

import hashlib
import json
from pathlib import Path

import numpy as np

from .. import DataError
from ..imaging import MATERIAL_CLASSES, Patch, load_strip, save_strip
from .scene import GroundTruth, SceneSpec, generate_strip

TRUTH_SCHEMA = "trackinspect-truth-1"
MANIFEST_SCHEMA = "trackinspect-manifest-1"


def rle_encode(labels):
    """Row-major run-length encoding as [[value, run], ...]."""
    flat = np.asarray(labels).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    runs = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(r)] for s, r in zip(starts, runs)]


def rle_decode(runs, shape):
    values = np.array([v for v, _ in runs], dtype=np.uint8)
    counts = np.array([r for _, r in runs], dtype=np.int64)
    flat = np.repeat(values, counts)
    if flat.size != shape[0] * shape[1]:
        raise DataError("run lengths do not cover the label map")
    return flat.reshape(shape)


def truth_to_json(truth):
    h, w = truth.label_map.shape
    return {"schema": TRUTH_SCHEMA, "strip_id": truth.strip_id, "mile_id": truth.mile_id,
            "height": h, "width": w, "difficult": bool(truth.difficult),
            "material_classes": list(MATERIAL_CLASSES),
            "label_map_rle": rle_encode(truth.label_map), "ties": truth.ties}


def truth_from_json(doc):
    if doc.get("schema") != TRUTH_SCHEMA:
        raise DataError(f"unsupported truth schema {doc.get('schema')!r}")
    labels = rle_decode(doc["label_map_rle"], (doc["height"], doc["width"]))
    return GroundTruth(labels, doc["ties"], doc["difficult"], doc["strip_id"], doc["mile_id"])


def save_truth(path, truth):
    Path(path).write_text(json.dumps(truth_to_json(truth), separators=(",", ":")))


def load_truth(path):
    return truth_from_json(json.loads(Path(path).read_text()))


def strip_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def split_ids(ids, ratios, rng):
    if abs(sum(ratios) - 1) > 1e-9 or min(ratios) < 0:
        raise DataError("split ratios must be non-negative and sum to 1")
    order = [ids[i] for i in rng.permutation(len(ids))]
    bounds = np.rint(np.cumsum(ratios) * len(ids)).astype(int)
    out, start = [], 0
    for b in bounds:
        out.append(sorted(order[start:b]))
        start = b
    return out


def generate_dataset(spec, n_strips, ratios=(0.8, 0.2), seed=0, out_dir=None, strips_per_mile=20,
                     names=("train", "test")):
    """Render ``n_strips`` strips and split them disjointly by strip.

    With ``out_dir`` every strip is written as PNG + .meta + .truth.json and
    the manifest is saved as manifest.json; without it the strips are kept in
    memory under manifest["data"].
    """
    spec.validate()
    ids = [f"s{i:04d}" for i in range(n_strips)]
    splits = split_ids(ids, ratios, np.random.default_rng([seed, 99]))
    manifest = {"schema": MANIFEST_SCHEMA, "seed": seed, "spec": spec.to_dict(),
                "splits": dict(zip(names, splits)), "strips": {}}
    data = {}
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(ids):
        mile = f"mile-{i // strips_per_mile:03d}"
        strip, truth = generate_strip(spec, strip_seed(seed, i), sid, mile, origin=(i % strips_per_mile) * spec.height)
        entry = {"mile_id": mile, "seed": strip_seed(seed, i), "n_ties": len(truth.ties)}
        if out:
            save_strip(out / f"{sid}.png", strip)
            save_truth(out / f"{sid}.truth.json", truth)
            entry.update(image=f"{sid}.png", truth=f"{sid}.truth.json")
        else:
            data[sid] = (strip, truth)
        manifest["strips"][sid] = entry
    if out:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    else:
        manifest["data"] = data
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{path}: not a dataset manifest")
    doc["root"] = str(path.parent)
    return doc


def manifest_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def iter_split(manifest, split):
    """Yield (strip, truth) for a split, from memory or from disk."""
    for sid in manifest["splits"][split]:
        if "data" in manifest:
            yield manifest["data"][sid]
        else:
            root = Path(manifest["root"])
            entry = manifest["strips"][sid]
            yield load_strip(root / entry["image"]), load_truth(root / entry["truth"])


def _box_sums(mask, size):
    """Count of set pixels in every size x size window (top-left indexed)."""
    c = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    c[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]


def patch_candidates(labels, cls, size, min_fraction=0.6):
    """Top-left corners of windows with >= min_fraction pixels of class ``cls`` whose center pixel is ``cls``."""
    if labels.shape[0] < size or labels.shape[1] < size:
        return np.empty((0, 2), dtype=int)
    mask = labels == cls
    sums = _box_sums(mask, size)
    need = int(np.ceil(min_fraction * size * size))
    half = size // 2
    centers_ok = mask[half:half + sums.shape[0], half:half + sums.shape[1]]
    return np.argwhere((sums >= need) & centers_ok)


def extract_patches(strip, truth, cls, n, size=75, rng=None, min_fraction=0.6):
    """Up to n labeled patches of material class ``cls``.

    Returns (patches, shortfall) where shortfall = n - len(patches).
    """
    rng = rng or np.random.default_rng(0)
    cand = patch_candidates(truth.label_map, cls, size, min_fraction)
    k = min(n, len(cand))
    picks = cand[rng.choice(len(cand), size=k, replace=False)] if k else cand[:0]
    patches = [Patch(strip.pixels[r:r + size, c:c + size].copy(), (strip.strip_id, int(r), int(c)), int(cls))
               for r, c in picks]
    return patches, n - k
