"""Training pools built from annotated strips, and mixed mini-batch composition."""

from dataclasses import dataclass, field

import numpy as np

from .. import ConfigError, DataError
from ..imaging import ClassCatalog, gain_normalize, subtract_mean
from ..synthgen.dataset import patch_candidates
from .loss import TrainBatch
from .model import FASTENER_WINDOW, MATERIAL_PATCH

JITTER = 9
WINDOW_CROP = FASTENER_WINDOW + 2 * JITTER


@dataclass
class NormalizeConfig:
    envelope_sigma: float = 32.0
    target_level: float = 1.0
    median_window: int = 31
    decimation: int = 4


def normalize_pixels(strip, norm, dataset_mean):
    """Gain-normalize then mean-subtract; returns float32 pixels."""
    g = gain_normalize(strip, norm.envelope_sigma, norm.target_level, norm.median_window, norm.decimation)
    return subtract_mean(g, dataset_mean).pixels.astype(np.float32)


@dataclass
class MaterialPool:
    patches: np.ndarray  # (N, 75, 75) normalized
    labels: np.ndarray
    difficult: np.ndarray


@dataclass
class WindowPool:
    """Fastener windows with a +-9 px margin: (M, 200, 200)."""
    windows: np.ndarray
    labels: np.ndarray  # fastener class id; background = catalog.background
    difficult: np.ndarray
    centers: np.ndarray = None  # annotated object center (row, col) in the window; NaN for background

    def __post_init__(self):
        if self.centers is None:
            self.centers = np.full((len(self.labels), 2), np.nan)


@dataclass
class BatchSizes:
    material: int = 128
    coarse: int = 16
    difficult_fraction: float = 0.5


@dataclass
class TrainingPools:
    material: MaterialPool
    windows: WindowPool
    catalog: ClassCatalog
    dataset_mean: float
    norm: NormalizeConfig = field(default_factory=NormalizeConfig)
    shortfall: dict = field(default_factory=dict)


class _Reservoir:
    """Keeps the ``cap`` items with the smallest random keys (a uniform subsample)."""

    def __init__(self, cap, rng):
        self.cap, self.rng = cap, rng
        self.keys, self.items = [], []

    def offer(self, items):
        if not items:
            return
        self.keys.extend(self.rng.random(len(items)).tolist())
        self.items.extend(items)
        if len(self.items) > 2 * self.cap:
            self._trim()

    def _trim(self):
        order = np.argsort(self.keys, kind="stable")[:self.cap]
        self.keys = [self.keys[i] for i in order]
        self.items = [self.items[i] for i in order]

    def result(self):
        self._trim()
        return self.items


def _window_crop(pixels, top, left):
    t, l = top - JITTER, left - JITTER
    if t < 0 or l < 0 or t + WINDOW_CROP > pixels.shape[0] or l + WINDOW_CROP > pixels.shape[1]:
        return None
    return pixels[t:t + WINDOW_CROP, l:l + WINDOW_CROP].copy()


def background_windows(truth, roi_lefts):
    """(top, left) of clutter windows halfway between consecutive ties, at the ROI columns."""
    out = []
    for a, b in zip(truth.ties[:-1], truth.ties[1:]):
        mid = (a["box"][2] + b["box"][0]) // 2
        top = mid - FASTENER_WINDOW // 2
        out.extend((top, left) for left in roi_lefts)
    return out


def build_pools(pairs, catalog=None, material_per_class=400, windows_per_class=200, background_cap=600,
                seed=0, norm=None, dataset_mean=None, min_fraction=0.6, require=None):
    """Extract material patches and fastener windows from (strip, truth) pairs.

    ``pairs`` is an iterable of (ImageStrip, GroundTruth), consumed once.
    Each class keeps a uniform random subsample of at most the given cap.
    Unless ``dataset_mean`` is given it is the mean of all gain-normalized
    training pixels, and it is subtracted from every stored sample. With
    ``require`` (a per-class minimum) a shortfall raises DataError listing
    every class below its minimum; otherwise shortfalls are only recorded.
    """
    catalog = catalog or ClassCatalog()
    norm = norm or NormalizeConfig()
    rng = np.random.default_rng([seed, 7])
    n_mat = len(catalog.material)
    mat_res = [_Reservoir(material_per_class, rng) for _ in range(n_mat)]
    win_res = {c: _Reservoir(windows_per_class, rng) for c in range(len(catalog.fastener))}
    win_res[catalog.background] = _Reservoir(background_cap, rng)
    total = count = 0.0
    for strip, truth in pairs:
        px = normalize_pixels(strip, norm, 0.0)
        total += float(px.sum(dtype=np.float64))
        count += px.size
        hard = bool(truth.difficult)
        for cls in range(n_mat):
            cand = patch_candidates(truth.label_map, cls, MATERIAL_PATCH, min_fraction)
            if len(cand) == 0:
                continue
            pick = cand[rng.choice(len(cand), size=min(len(cand), material_per_class), replace=False)]
            mat_res[cls].offer([(px[r:r + MATERIAL_PATCH, c:c + MATERIAL_PATCH].copy(), hard) for r, c in pick])
        lefts = set()
        for tie in truth.ties:
            if tie["flags"].get("uninspectable"):
                continue
            for roi in tie["rois"]:
                if roi.get("covered"):
                    continue
                top, left = roi["window"][:2]
                lefts.add(left)
                crop = _window_crop(px, top, left)
                if crop is not None:
                    if roi["class"] == catalog.background:
                        center = (np.nan, np.nan)
                    else:
                        g = roi["glyph_box"]
                        center = ((g[0] + g[2] - 1) / 2 - top + JITTER, (g[1] + g[3] - 1) / 2 - left + JITTER)
                    win_res[roi["class"]].offer([(crop, hard, center)])
        for top, left in background_windows(truth, sorted(lefts)):
            crop = _window_crop(px, top, left)
            if crop is not None:
                win_res[catalog.background].offer([(crop, hard, (np.nan, np.nan))])

    shortfall, counts = {}, {}
    mats, mat_labels, mat_hard = [], [], []
    for cls, res in enumerate(mat_res):
        items = res.result()
        key = f"material:{catalog.material[cls]}"
        counts[key] = len(items)
        if len(items) < material_per_class:
            shortfall[key] = material_per_class - len(items)
        mats.extend(p for p, _ in items)
        mat_labels.extend([cls] * len(items))
        mat_hard.extend(h for _, h in items)
    wins, win_labels, win_hard, win_centers = [], [], [], []
    for cls, res in win_res.items():
        items = res.result()
        cap = background_cap if cls == catalog.background else windows_per_class
        key = "fastener:" + ("background" if cls == catalog.background else catalog.fastener[cls])
        counts[key] = len(items)
        if len(items) < cap:
            shortfall[key] = cap - len(items)
        wins.extend(w for w, _, _ in items)
        win_labels.extend([cls] * len(items))
        win_hard.extend(h for _, h, _ in items)
        win_centers.extend(c for _, _, c in items)
    if require:
        # require maps "material" / "fastener" to a per-class minimum
        below = {k: n for k, n in counts.items() if n < require.get(k.split(":", 1)[0], 0)}
        if below:
            raise DataError(f"patch supply below the requested minimum: {below}")
    if not mats or not wins:
        raise DataError("no training patches could be extracted")
    if dataset_mean is None:
        dataset_mean = total / count
    shift = np.float32(dataset_mean)
    material = MaterialPool(np.stack(mats) - shift, np.array(mat_labels), np.array(mat_hard))
    windows = WindowPool(np.stack(wins) - shift, np.array(win_labels), np.array(win_hard),
                         np.array(win_centers, dtype=np.float64).reshape(-1, 2))
    return TrainingPools(material, windows, catalog, dataset_mean, norm, shortfall)


def _crop_jitter(win, rng):
    dr, dc = rng.integers(0, 2 * JITTER + 1, size=2)
    return win[dr:dr + FASTENER_WINDOW, dc:dc + FASTENER_WINDOW], int(dr), int(dc)


class BatchComposer:
    """Draws mixed mini-batches from training pools with explicit RNG streams.

    Material patches: classes sampled uniformly, a fixed fraction from the
    difficult pool when it is non-empty, random flips on both axes.
    Coarse windows: coarse classes sampled uniformly. SVM tasks: one window
    per assigned head, positive or negative with equal probability, +-9 px
    jitter, and random flips about the vertical axis for symmetric classes.
    """

    def __init__(self, pools, sizes=None, n_svm=None):
        self.pools = pools
        self.sizes = sizes or BatchSizes()
        cat = pools.catalog
        self.n_svm = cat.n_svm_outputs if n_svm is None else n_svm
        mp, wp = pools.material, pools.windows
        if len(mp.labels) == 0 and self.sizes.material:
            raise ConfigError("material pool is empty")
        self._mat_index = {}
        for hard in (False, True):
            sel = mp.difficult == hard
            groups = {int(c): np.flatnonzero(sel & (mp.labels == c)) for c in np.unique(mp.labels[sel])}
            self._mat_index[hard] = groups
        self._all_mat = {int(c): np.flatnonzero(mp.labels == c) for c in np.unique(mp.labels)}
        self._win_by_class = {int(c): np.flatnonzero(wp.labels == c) for c in np.unique(wp.labels)}
        coarse_of = np.array([cat.coarse_class(int(c)) for c in wp.labels])
        self._coarse = coarse_of
        self._win_by_coarse = {int(k): np.flatnonzero(coarse_of == k) for k in np.unique(coarse_of)}
        if self.sizes.coarse and not self._win_by_coarse:
            raise ConfigError("fastener window pool is empty")
        self.heads = []
        for head in range(self.n_svm):
            c, kind = divmod(head, 2)
            if c >= len(cat.fastener):
                continue  # surplus outputs stay unassigned
            pos = self._win_by_class.get(c, np.empty(0, int))
            if kind == 0:
                neg = self._win_by_class.get(cat.background, np.empty(0, int))
            else:
                neg = np.flatnonzero((wp.labels != c) & (wp.labels != cat.background))
            if len(pos) == 0 or len(neg) == 0:
                raise ConfigError(f"SVM task {head} ({cat.fastener[c]}, {'bf'[kind]}) has an empty pool")
            self.heads.append((head, pos, neg))

    def _material(self, rng):
        n = self.sizes.material
        has_hard = bool(self._mat_index[True])
        n_hard = int(np.ceil(self.sizes.difficult_fraction * n)) if has_hard else 0
        idx = []
        for k in range(n):
            groups = self._mat_index[True] if k < n_hard else (self._mat_index[False] or self._all_mat)
            classes = sorted(groups)
            members = groups[classes[int(rng.integers(len(classes)))]]
            idx.append(int(members[int(rng.integers(len(members)))]))
        idx = np.array(idx, dtype=int)
        x = self.pools.material.patches[idx].copy()
        flips = rng.random((n, 2)) < 0.5
        x[flips[:, 0]] = x[flips[:, 0]][:, :, ::-1]
        x[flips[:, 1]] = x[flips[:, 1]][:, ::-1, :]
        return x[:, None], self.pools.material.labels[idx], self.pools.material.difficult[idx]

    def _window(self, i, rng, allow_flip):
        """Jittered, possibly mirrored crop and the annotated center in its coordinates."""
        w, dr, dc = _crop_jitter(self.pools.windows.windows[i], rng)
        cy, cx = self.pools.windows.centers[i]
        cy, cx = cy - dr, cx - dc
        if allow_flip and rng.random() < 0.5:
            w = w[:, ::-1]
            cx = FASTENER_WINDOW - 1 - cx
        return w, (cy, cx)

    def _is_symmetric(self, label):
        cat = self.pools.catalog
        return label == cat.background or cat.is_symmetric(label)

    def compose(self, rng, batch_id=0):
        mx, my, mhard = self._material(rng) if self.sizes.material else (
            np.empty((0, 1, MATERIAL_PATCH, MATERIAL_PATCH), np.float32), np.empty(0, int), np.empty(0, bool))
        labels = self.pools.windows.labels
        coarse_x, coarse_y = [], []
        keys = sorted(self._win_by_coarse)
        for _ in range(self.sizes.coarse):
            k = keys[int(rng.integers(len(keys)))]
            members = self._win_by_coarse[k]
            i = int(members[int(rng.integers(len(members)))])
            # flips keep the coarse class: mirrored categories share it
            coarse_x.append(self._window(i, rng, True)[0])
            coarse_y.append(k)
        svm_x, svm_head, svm_y, svm_center = [], [], [], []
        for head, pos, neg in self.heads:
            y = 1 if rng.random() < 0.5 else -1
            members = pos if y == 1 else neg
            i = int(members[int(rng.integers(len(members)))])
            w, center = self._window(i, rng, self._is_symmetric(int(labels[i])))
            svm_x.append(w)
            svm_center.append(center)
            svm_head.append(head)
            svm_y.append(y)
        shape = (0, 1, FASTENER_WINDOW, FASTENER_WINDOW)
        stack = lambda xs: np.stack(xs)[:, None].astype(np.float32) if xs else np.empty(shape, np.float32)
        return TrainBatch(mx.astype(np.float32), np.asarray(my), stack(coarse_x), np.array(coarse_y, dtype=int),
                          stack(svm_x), np.array(svm_head, dtype=int), np.array(svm_y, dtype=int),
                          difficult=np.asarray(mhard), batch_id=batch_id,
                          svm_center=np.array(svm_center, dtype=np.float64).reshape(-1, 2))


def compose_batch(pools, rng, sizes=None, n_svm=None, batch_id=0):
    return BatchComposer(pools, sizes, n_svm).compose(rng, batch_id)
