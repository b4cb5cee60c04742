"""Decision layer: dual-SVM likelihoods, fastener and tie-condition scores, pairwise deciders.

Every function here is pure. Argmax ties resolve to the lowest index so
replays are deterministic.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ConfigError, DataError
from .imaging import ClassCatalog

VERDICT_SCHEMA = "trackinspect-verdicts-1"
REFERENCE_TAU = 0.1070


@dataclass(frozen=True)
class LinearClassifier:
    w: np.ndarray
    b: float = 0.0

    def score(self, x):
        return np.asarray(x) @ self.w + self.b


@dataclass(frozen=True)
class ClassifierPair:
    """b: class vs background; f: class vs the other object classes."""
    label: int
    b: LinearClassifier
    f: LinearClassifier

    def __post_init__(self):
        if np.shape(self.b.w) != np.shape(self.f.w):
            raise ValueError("b and f classifiers must share the feature dimension")


def pairs_from_model(model, catalog):
    """ClassifierPairs read from the network's 1x1 SVM layer (head 2c = b_c, 2c+1 = f_c)."""
    p = model.params["conv5_svm"]
    w = p.weights[:, :, 0, 0].astype(np.float64)
    bias = p.biases.astype(np.float64)
    out = []
    for c in range(len(catalog.fastener)):
        hb, hf = catalog.svm_head(c, "b"), catalog.svm_head(c, "f")
        out.append(ClassifierPair(c, LinearClassifier(w[hb], float(bias[hb])),
                                  LinearClassifier(w[hf], float(bias[hf]))))
    return out


def as_rows(X):
    """Feature grid (D, h, w) or list of vectors (P, D) -> (P, D)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        return X.reshape(X.shape[0], -1).T
    if X.ndim == 1:
        return X[None, :]
    return X


def likelihood_from_scores(bs, fs):
    """L = b.x + min(0, f.x), elementwise over precomputed classifier outputs."""
    return np.asarray(bs) + np.minimum(0.0, fs)


def class_likelihood(pair, x):
    return likelihood_from_scores(pair.b.score(x), pair.f.score(x))


def region_likelihood(pair, X):
    """(max over grid of L_c, index of the first maximizing cell)."""
    rows = as_rows(X)
    if rows.shape[0] == 0:
        raise DataError("empty feature grid")
    vals = class_likelihood(pair, rows)
    k = int(np.argmax(vals))
    return float(vals[k]), k


def score_grids(pairs, X):
    """(B, F) each (C, P): outputs of every b_c and f_c at every grid cell."""
    rows = as_rows(X)
    wb = np.stack([p.b.w for p in pairs])
    wf = np.stack([p.f.w for p in pairs])
    bb = np.array([p.b.b for p in pairs])
    bf = np.array([p.f.b for p in pairs])
    return wb @ rows.T + bb[:, None], wf @ rows.T + bf[:, None]


def classify_from_scores(B, F, background):
    """(c_hat, per-class region likelihoods, argmax cell per class)."""
    L = likelihood_from_scores(B, F)
    cells = np.argmax(L, axis=1)
    Lc = L[np.arange(L.shape[0]), cells]
    best = int(np.argmax(Lc))
    return (best if Lc[best] > 0 else background), Lc, cells


def classify_roi(pairs, X, background=None):
    """argmax_c L_c when the best likelihood is positive, else the background/missing label."""
    background = len(pairs) if background is None else background
    B, F = score_grids(pairs, X)
    return classify_from_scores(B, F, background)[0]


@dataclass
class FastenerScore:
    s_missing: float
    s_broken: float
    score: float
    c_hat: int
    cell: int
    likelihoods: list = field(default_factory=list)


def fastener_score_from_scores(B, F, catalog):
    good, broken = catalog.good_ids, catalog.broken_ids
    if not good or not broken:
        raise ConfigError("fastener scoring needs both good and broken classes")
    c_hat, Lc, cells = classify_from_scores(B, F, catalog.background)
    s_m = float(np.max(Lc[good]))
    s_b = -float(np.max(F[broken]))
    g_best = good[int(np.argmax(Lc[good]))]
    return FastenerScore(s_m, s_b, min(s_m, s_b), c_hat, int(cells[g_best]), [float(v) for v in Lc])


def fastener_score(pairs, X, catalog=None):
    """S_m = max over good classes of L_c; S_b = -max over broken classes and cells of f_c.x; S = min."""
    catalog = catalog or ClassCatalog()
    B, F = score_grids(pairs, X)
    return fastener_score_from_scores(B, F, catalog)


def decide(score, tau=REFERENCE_TAU):
    """Good iff the score strictly exceeds tau."""
    return "good" if score > tau else "defective"


def material_site_score(scores, defect, defect_ids=None):
    """S_b(x, y) = max over non-defect channels minus the defect channel, per site.

    scores: (channels, rows, cols). Both defect channels are excluded from the max.
    """
    scores = np.asarray(scores, dtype=np.float64)
    defect_ids = ClassCatalog().defect_material_ids if defect_ids is None else list(defect_ids)
    keep = [i for i in range(scores.shape[0]) if i not in defect_ids]
    return np.max(scores[keep], axis=0) - scores[defect]


def tie_condition_score(site_scores, alpha=0.9, beta=1.0):
    """Average of the empirical quantile function over [alpha, beta].

    The inverse CDF is left-continuous: the k-th order statistic on
    ((k-1)/n, k/n]. The integral is evaluated exactly from the overlap of each
    step with [alpha, beta], using a correctly rounded sum.
    """
    s = np.sort(np.asarray(site_scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise DataError("tie-condition score needs at least one site")
    if not 0 <= alpha < beta <= 1:
        raise ValueError("need 0 <= alpha < beta <= 1")
    lo, hi = alpha * n, beta * n
    k0 = int(math.floor(lo))
    k1 = min(int(math.ceil(hi)), n)
    terms = []
    for k in range(k0, k1):  # step k+1 covers (k, k+1] in units of 1/n
        overlap = min(k + 1, hi) - max(k, lo)
        if overlap >= 1:
            terms.append(s[k])
        elif overlap > 0:
            terms.append(s[k] * overlap)
    return math.fsum(terms) / (hi - lo)


# -- pairwise deciders for the classical baselines --------------------------------

def _pair_score(pairwise, i, j, x):
    """Score of the i-vs-j classifier, positive favoring i (stored once per unordered pair)."""
    if (i, j) in pairwise:
        return float(pairwise[(i, j)].score(x))
    return -float(pairwise[(j, i)].score(x))


def _duel(pairwise, i, j, x):
    """Winner of i vs j; a zero score goes to the lower index."""
    s = _pair_score(pairwise, i, j, x)
    if s == 0:
        return min(i, j)
    return i if s > 0 else j


def dag_svm_classify(pairwise, gates, x, classes, background):
    """Background gates first, then DAG elimination over ``classes``.

    If no class-vs-background gate is positive the result is ``background``.
    Otherwise the candidate list is reduced by testing its first against its
    last member and dropping the loser until one class remains.
    """
    if not any(float(gates[c].score(x)) > 0 for c in classes):
        return background
    return dag_eliminate(pairwise, x, classes)


def dag_eliminate(pairwise, x, classes):
    cand = list(classes)
    while len(cand) > 1:
        i, j = cand[0], cand[-1]
        if _duel(pairwise, i, j, x) == i:
            cand.pop()
        else:
            cand.pop(0)
    return cand[0]


def majority_vote_classify(pairwise, x, classes):
    """One-vs-one tally over ``classes`` (background included by the caller); ties -> lowest class."""
    classes = sorted(classes)
    votes = {c: 0 for c in classes}
    for a in range(len(classes)):
        for b in range(a + 1, len(classes)):
            votes[_duel(pairwise, classes[a], classes[b], x)] += 1
    top = max(votes.values())
    return min(c for c, v in votes.items() if v == top)


def baseline_pair_scores(pairwise, x, catalog, decider="dag", gates=None):
    """(S_m, S_b, S) for the pairwise baselines.

    The most likely good class g and broken class b are picked by the chosen
    decider restricted to each group; S_b is the g-vs-b classifier output and
    S_m the g-vs-background output.
    """
    good, broken, bg = catalog.good_ids, catalog.broken_ids, catalog.background
    if not good or not broken:
        raise ConfigError("baseline scoring needs both good and broken classes")
    if decider == "dag":
        g, b = dag_eliminate(pairwise, x, good), dag_eliminate(pairwise, x, broken)
    elif decider == "majority":
        g, b = majority_vote_classify(pairwise, x, good), majority_vote_classify(pairwise, x, broken)
    else:
        raise ConfigError(f"unknown decider {decider!r}")
    s_b = _pair_score(pairwise, g, b, x)
    s_m = _pair_score(pairwise, g, bg, x)
    return s_m, s_b, min(s_m, s_b)


# -- verdict records ---------------------------------------------------------------

@dataclass
class RoiVerdict:
    roi_id: str
    tie_id: str
    name: str
    c_hat: int = None
    cell: int = None
    s_missing: float = None
    s_broken: float = None
    score: float = None
    verdict: str = "uninspectable"
    likelihoods: list = field(default_factory=list)


@dataclass
class TieVerdict:
    tie_id: str
    strip_id: str
    mile_id: str
    rois: list
    score: float = None
    verdict: str = "uninspectable"
    s_crumbling: float = None
    s_chipped: float = None
    flags: dict = field(default_factory=dict)


def roi_verdict(roi_id, tie_id, name, fs, tau=REFERENCE_TAU):
    if fs is None:
        return RoiVerdict(roi_id, tie_id, name)
    return RoiVerdict(roi_id, tie_id, name, fs.c_hat, fs.cell, fs.s_missing, fs.s_broken, fs.score,
                      decide(fs.score, tau), fs.likelihoods)


def tie_verdict(tie_id, strip_id, mile_id, rois, material_scores=None, flags=None, tau=REFERENCE_TAU):
    """Tie score = min over its 4 ROIs; uninspectable ROIs are skipped, and a tie with none left is uninspectable."""
    if len(rois) != 4:
        raise DataError(f"tie {tie_id} has {len(rois)} ROIs, expected 4")
    flags = dict(flags or {})
    scored = [r.score for r in rois if r.score is not None]
    material_scores = material_scores or {}
    tv = TieVerdict(tie_id, strip_id, mile_id, rois, s_crumbling=material_scores.get("crumbling"),
                    s_chipped=material_scores.get("chipped"), flags=flags)
    if scored:
        tv.score = min(scored)
        tv.verdict = decide(tv.score, tau)
    else:
        flags["uninspectable"] = True
    return tv


ROI_FIELDS = ("strip_id", "mile_id", "tie_id", "roi_id", "name", "c_hat", "cell", "s_missing", "s_broken",
              "score", "verdict")
TIE_FIELDS = ("strip_id", "mile_id", "tie_id", "score", "verdict", "s_crumbling", "s_chipped", "turnout",
              "covered", "uninspectable")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def roi_rows(ties):
    for t in ties:
        for r in t.rois:
            d = asdict(r)
            d.update(strip_id=t.strip_id, mile_id=t.mile_id)
            yield [_fmt(d[k]) for k in ROI_FIELDS]


def tie_rows(ties):
    for t in ties:
        d = asdict(t)
        for k in ("turnout", "covered", "uninspectable"):
            d[k] = int(bool(t.flags.get(k, False)))
        yield [_fmt(d[k]) for k in TIE_FIELDS]


def write_verdicts(out_dir, ties, header=None):
    """rois.csv, ties.csv and verdicts.jsonl (one record per ROI and per tie).

    ``header`` adds run details (model, thresholds) to the first JSON record.
    """
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rois.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROI_FIELDS)
        w.writerows(roi_rows(ties))
    with open(out / "ties.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIE_FIELDS)
        w.writerows(tie_rows(ties))
    with open(out / "verdicts.jsonl", "w") as fh:
        fh.write(json.dumps({**(header or {}), "schema": VERDICT_SCHEMA, "record": "header"}, sort_keys=True) + "\n")
        for t in ties:
            for r in t.rois:
                rec = {"record": "roi", "strip_id": t.strip_id, "mile_id": t.mile_id, **asdict(r)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            rec = {"record": "tie", **{k: v for k, v in asdict(t).items() if k != "rois"}}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_verdicts(path, with_header=False):
    """Tie records (dicts with their ROI records under 'rois') from verdicts.jsonl.

    With ``with_header`` returns (header, ties).
    """
    from pathlib import Path
    path = Path(path)
    if path.is_dir():
        path = path / "verdicts.jsonl"
    ties, pending = [], []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != VERDICT_SCHEMA:
            raise DataError(f"{path}: unsupported verdict schema")
        for line in fh:
            rec = json.loads(line)
            if rec.pop("record") == "roi":
                pending.append(rec)
            else:
                rec["rois"] = pending
                ties.append(rec)
                pending = []
    if pending:
        raise DataError(f"{path}: ROI records after the last tie")
    return (header, ties) if with_header else ties
