"""Pipeline stages behind the CLI commands: synth, train, segment, inspect, evaluate, report."""

import csv
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .. import ConfigError, DataError
from ..decision import (fastener_score_from_scores, material_site_score, read_verdicts, roi_verdict,
                        tie_condition_score, tie_verdict, write_verdicts)
from ..evalkit import (confusion_matrix, filter_by_severity, pd_at_fp_rate, roc, summary_json, summary_table,
                       threshold_at_fp_rate, write_confusion_csv, write_roc_csv)
from ..imaging import MATERIAL_CLASSES, ClassCatalog, write_image
from ..mtlnet import NetConfig, build_network, infer_scoremaps, roi_features, segment
from ..mtlnet.data import BatchSizes, NormalizeConfig, build_pools, normalize_pixels
from ..mtlnet.loss import TaskWeights
from ..mtlnet.train import TrainConfig, load_model, stl_config, train, write_trace_csv
from ..synthgen import SceneSpec, generate_dataset, iter_split, load_manifest, load_truth

log = logging.getLogger("trackinspect.pipeline")

DEFECT_TYPES = ("crumbling", "chipped")
SUBSETS = ("clear", "clear-switches", "all")


# -- configuration glue -------------------------------------------------------------

def scene_spec(cfg):
    s = cfg.synth
    return SceneSpec(height=s["height"], broken_rate=s["broken_rate"], missing_rate=s["missing_rate"],
                     crumbling_rate=s["crumbling_rate"], chipped_rate=s["chipped_rate"],
                     difficult_rate=s["difficult_rate"], turnout_rate=s["turnout_rate"],
                     covered_rate=s["covered_rate"])


def catalog_for(cfg):
    return ClassCatalog(n_svm_outputs=cfg.net["n_svm"])


def net_config(cfg):
    n = cfg.net
    return NetConfig(c1=n["c1"], c2=n["c2"], c3=n["c3"], c4_fastener=n["c4_fastener"], n_svm=n["n_svm"],
                     dropout_trunk=n["dropout_trunk"], dropout_fastener=n["dropout_fastener"])


def train_config(cfg, mode):
    t = cfg.train
    lam_svm = None if t["lambda_svm"] < 0 else t["lambda_svm"]
    base = TrainConfig(iterations=t["iterations"], base_lr=t["base_lr"], lr_decay=t["lr_decay"],
                       lr_step=t["lr_step"], momentum=t["momentum"], weight_decay=t["weight_decay"],
                       log_every=t["log_every"], checkpoint_every=t["checkpoint_every"],
                       batch=BatchSizes(t["batch_material"], t["batch_coarse"], t["difficult_fraction"]),
                       weights=TaskWeights(t["lambda_material"], t["lambda_coarse"], lam_svm))
    if mode == "mtl":
        return base
    if mode in ("stl-material", "stl-fastener"):
        return stl_config(base, mode.split("-", 1)[1], t["batch_stl_material"])
    raise ConfigError(f"unknown training mode {mode!r}")


def open_manifest(cfg):
    path = cfg.path("data") / "manifest.json"
    if not path.is_file():
        raise DataError(f"no dataset at {path.parent}; run 'trackinspect synth' first")
    return load_manifest(path)


def checkpoint_path(cfg, mode):
    return cfg.path("checkpoints") / f"{mode}.ckpt"


# -- synth / train ------------------------------------------------------------------

def cmd_synth(cfg):
    spec = scene_spec(cfg)
    spec.validate()
    out = cfg.path("data")
    r = cfg.synth["train_ratio"]
    manifest = generate_dataset(spec, cfg.synth["strips"], (r, 1 - r), seed=cfg.run["seed"], out_dir=out,
                                strips_per_mile=cfg.synth["strips_per_mile"])
    n_ties = sum(e["n_ties"] for e in manifest["strips"].values())
    log.info("wrote %d strips (%d ties) to %s", len(manifest["strips"]), n_ties, out)
    return out / "manifest.json"


def training_pools(cfg, manifest, catalog, dataset_mean=None):
    d = cfg.data
    return build_pools(iter_split(manifest, "train"), catalog, material_per_class=d["material_per_class"],
                       windows_per_class=d["windows_per_class"], background_cap=d["background_cap"],
                       seed=cfg.run["seed"], dataset_mean=dataset_mean, min_fraction=d["min_fraction"])


def cmd_train(cfg, mode="mtl", resume=False, pools=None):
    """Train one model; returns the checkpoint path. The loss trace goes to <mode>_loss.csv."""
    tcfg = train_config(cfg, mode)
    catalog = catalog_for(cfg)
    ckpt = checkpoint_path(cfg, mode)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    trace_path = ckpt.with_name(f"{mode}_loss.csv")
    start, mean = 0, None
    if resume and ckpt.is_file():
        model, meta = load_model(ckpt)
        start, mean = meta["iteration"], meta["dataset_mean"]
        log.info("resuming %s at iteration %d", mode, start)
    else:
        model = build_network(net_config(cfg), catalog, seed=cfg.run["seed"])
    if pools is None:
        pools = training_pools(cfg, open_manifest(cfg), catalog, mean)
    for key, n in sorted(pools.shortfall.items()):
        log.warning("patch shortfall %s: %d", key, n)
    meta = {"mode": mode, "seed": cfg.run["seed"], "dataset_mean": float(pools.dataset_mean),
            "norm": asdict(pools.norm), "n_svm_outputs": catalog.n_svm_outputs}
    remaining = max(0, tcfg.iterations - start)
    model, trace = train(model, pools, replace(tcfg, iterations=remaining), seed=cfg.run["seed"],
                         start_iteration=start, checkpoint_path=ckpt, meta=meta)
    write_trace_csv(trace_path, trace, append=bool(start) and trace_path.is_file())
    log.info("saved %s after %d iterations", ckpt, start + remaining)
    return ckpt


def open_model(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    model, meta = load_model(path)
    for key in ("dataset_mean", "norm"):
        if key not in meta:
            raise DataError(f"{path}: checkpoint lacks '{key}' (not written by 'trackinspect train')")
    return model, meta


def strip_pixels(strip, meta):
    return normalize_pixels(strip, NormalizeConfig(**meta["norm"]), meta["dataset_mean"])


def material_accuracy(model, pool, chunk=200):
    """Patch-level accuracy of the material head on a MaterialPool."""
    preds = [np.argmax(model.material_scores(pool.patches[i:i + chunk, None])[:, :, 0, 0], axis=1)
             for i in range(0, len(pool.labels), chunk)]
    preds = np.concatenate(preds) if preds else np.empty(0, int)
    return confusion_matrix(preds, pool.labels, len(MATERIAL_CLASSES))


# -- segment / inspect --------------------------------------------------------------

def cmd_segment(cfg, checkpoint, split="test", out=None):
    model, meta = open_model(checkpoint)
    out = Path(out) if out else cfg.path("reports") / "segment"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "legend.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "material"])
        w.writerows(enumerate(MATERIAL_CLASSES))
    n = 0
    for strip, truth in iter_split(open_manifest(cfg), split):
        maps = infer_scoremaps(model, strip_pixels(strip, meta))
        labels = segment(maps)
        write_image(out / f"{truth.strip_id}_labels.png", labels.astype(np.uint8))
        np.save(out / f"{truth.strip_id}_scores.npy", maps.scores)
        n += 1
    log.info("segmented %d strips into %s", n, out)
    return out


def _tie_sites(maps, box):
    rows, cols = maps.site_centers()
    r = (rows >= box[0]) & (rows < box[2])
    c = (cols >= box[1]) & (cols < box[3])
    return np.ix_(r, c)


def inspect_strip(model, meta, strip, truth, catalog, decision):
    """Tie verdicts for one strip plus site-level material (predictions, truths)."""
    px = strip_pixels(strip, meta)
    maps = infer_scoremaps(model, px)
    rows, cols = maps.site_centers()
    pred = segment(maps)
    site_truth = truth.label_map[np.ix_(rows, cols)]
    # defect evidence: positive where a defect channel beats every other material
    evidence = {t: -material_site_score(maps.scores, catalog.material.index(t), catalog.defect_material_ids)
                for t in DEFECT_TYPES}
    windows, where = [], []
    h, w = px.shape
    for ti, tie in enumerate(truth.ties):
        for ri, roi in enumerate(tie["rois"]):
            top, left = roi["window"][:2]
            if 0 <= top and top + 182 <= h and 0 <= left and left + 182 <= w:
                windows.append((top, left))
                where.append((ti, ri))
    feats = dict(zip(where, roi_features(model, px, windows))) if windows else {}
    n_cls = len(catalog.fastener)
    ties = []
    for ti, tie in enumerate(truth.ties):
        rois = []
        for ri, roi in enumerate(tie["rois"]):
            fs = None
            if (ti, ri) in feats:
                svm = feats[(ti, ri)][1].astype(np.float64)
                B = svm[0:2 * n_cls:2].reshape(n_cls, -1)
                F = svm[1:2 * n_cls:2].reshape(n_cls, -1)
                fs = fastener_score_from_scores(B, F, catalog)
            rois.append(roi_verdict(f"{tie['tie_id']}/{roi['name']}", tie["tie_id"], roi["name"], fs,
                                    decision["tau"]))
        sel = _tie_sites(maps, tie["box"])
        scores = {}
        for t in DEFECT_TYPES:
            vals = evidence[t][sel]
            scores[t] = tie_condition_score(vals, decision["alpha"], decision["beta"]) if vals.size else None
        flags = {k: bool(v) for k, v in tie["flags"].items()}
        for t in DEFECT_TYPES:
            flags[f"{t}_alarm"] = scores[t] is not None and scores[t] > decision["tau_tie"]
        ties.append(tie_verdict(tie["tie_id"], truth.strip_id, truth.mile_id, rois, scores, flags,
                                decision["tau"]))
    return ties, pred.ravel(), site_truth.ravel()


def cmd_inspect(cfg, checkpoint, split="test", out=None, tau=None):
    model, meta = open_model(checkpoint)
    decision = dict(cfg.decision)
    if tau is not None:
        decision["tau"] = float(tau)
    catalog = ClassCatalog(n_svm_outputs=meta.get("n_svm_outputs", model.cfg.n_svm))
    mode = meta.get("mode", "model")
    out = Path(out) if out else cfg.path("reports") / "inspect" / mode
    ties, preds, truths = [], [], []
    for strip, truth in iter_split(open_manifest(cfg), split):
        t, p, y = inspect_strip(model, meta, strip, truth, catalog, decision)
        ties.extend(t)
        preds.append(p)
        truths.append(y)
    write_verdicts(out, ties, header={"model": mode, "split": split, "tau": decision["tau"],
                                      "tau_tie": decision["tau_tie"]})
    m, acc = confusion_matrix(np.concatenate(preds) if preds else [], np.concatenate(truths) if truths else [],
                              len(MATERIAL_CLASSES))
    write_confusion_csv(out / "site_confusion.csv", m, MATERIAL_CLASSES)
    log.info("inspected %d ties; site-level material accuracy %.4f", len(ties), acc)
    return out


# -- evaluate -----------------------------------------------------------------------

def truth_index(manifest, split="test"):
    """tie_id -> ground-truth tie record for one split (labels only, no pixels)."""
    out = {}
    root = Path(manifest.get("root", "."))
    for sid in manifest["splits"][split]:
        entry = manifest["strips"][sid]
        truth = manifest["data"][sid][1] if "data" in manifest else load_truth(root / entry["truth"])
        for tie in truth.ties:
            out[tie["tie_id"]] = tie
    return out


def in_subset(flags, subset):
    if subset == "all":
        return True
    if flags.get("uninspectable") or flags.get("covered"):
        return False
    return subset == "clear-switches" or not flags.get("turnout")


def _roi_truth(truth_tie, name):
    for roi in truth_tie["rois"]:
        if roi["name"] == name:
            return roi
    raise DataError(f"tie {truth_tie['tie_id']} has no ROI {name}")


def evaluate_run(ties, truths, subset="clear", levels=(0.0, 0.1), fp_rates=(2, 10)):
    """Metrics for one verdict set against ground truth. Returns (results dict, curves dict)."""
    if subset not in SUBSETS:
        raise ConfigError(f"subset must be one of {SUBSETS}")
    roi_s, roi_y, tie_s, tie_y, tie_pred = [], [], [], [], []
    sev, cond = [], {t: [] for t in DEFECT_TYPES}
    for t in ties:
        if t["tie_id"] not in truths:
            raise DataError(f"verdict for unknown tie {t['tie_id']}")
        gt = truths[t["tie_id"]]
        if not in_subset(gt["flags"], subset):
            continue
        defective = False
        for r in t["rois"]:
            rt = _roi_truth(gt, r["name"])
            bad = rt["condition"] != "good"
            defective |= bad
            if r["score"] is not None and not rt.get("covered"):
                roi_s.append(-r["score"])
                roi_y.append(bad)
        if t["score"] is not None:
            tie_s.append(-t["score"])
            tie_y.append(defective)
            tie_pred.append(t["verdict"] == "defective")
        if all(t[f"s_{k}"] is not None for k in DEFECT_TYPES):
            got = {d["type"]: d["severity"] for d in gt["defects"]}
            sev.append([got.get(k, 0.0) for k in DEFECT_TYPES])
            for k in DEFECT_TYPES:
                cond[k].append(t[f"s_{k}"])
    results, curves = {"subset": subset}, {}

    def add_curve(name, scores, labels):
        labels = np.asarray(labels, dtype=bool)
        if labels.all() or not labels.any():
            results[name] = {"n_pos": int(labels.sum()), "n_neg": int((~labels).sum()), "auc": None}
            return
        c = roc(scores, labels)
        curves[name] = c
        results[name] = {"n_pos": c.n_pos, "n_neg": c.n_neg, "auc": c.auc,
                         "pd": {str(f): pd_at_fp_rate(c, f) for f in fp_rates},
                         "threshold": {str(f): threshold_at_fp_rate(c, f) for f in fp_rates}}

    add_curve("fastener_roi", roi_s, roi_y)
    add_curve("fastener_tie", tie_s, tie_y)
    y, p = np.asarray(tie_y, bool), np.asarray(tie_pred, bool)
    results["fastener_operating_point"] = {
        "pd": float(p[y].mean()) if y.any() else None,
        "pfa": float(p[~y].mean()) if (~y).any() else None,
    }
    sev = np.asarray(sev, dtype=np.float64).reshape(-1, len(DEFECT_TYPES))
    for k, name in enumerate(DEFECT_TYPES):
        scores = np.asarray(cond[name], dtype=np.float64)
        for level in levels:
            sub = filter_by_severity(sev, k, level)
            add_curve(f"{name}@{level:g}", scores[sub.include], sub.labels())
    return results, curves


def cmd_evaluate(cfg, verdict_dirs, subset=None, out=None, split="test"):
    subset = subset or cfg.eval["subset"]
    levels = cfg.float_list("eval", "severity_levels")
    fp_rates = cfg.float_list("eval", "fp_rates")
    truths = truth_index(open_manifest(cfg), split)
    out = Path(out) if out else cfg.path("reports") / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for vd in verdict_dirs:
        vd = Path(vd)
        header, ties = read_verdicts(vd, with_header=True)
        label = header.get("model", vd.name)
        results, curves = evaluate_run(ties, truths, subset, levels, fp_rates)
        conf = vd / "site_confusion.csv"
        if conf.is_file():
            with open(conf) as fh:
                m = np.array([[int(v) for v in row[1:]] for row in list(csv.reader(fh))[1:]])
            results["material_site_accuracy"] = float(np.trace(m) / m.sum()) if m.sum() else None
            write_confusion_csv(out / f"{label}_site_confusion.csv", m, MATERIAL_CLASSES)
        for name, c in curves.items():
            write_roc_csv(out / f"{label}_roc_{name.replace('@', '_sev')}.csv", c)
        runs[label] = results
    rows = []
    labels = list(runs)
    for name in [f"{t}@{lv:g}" for t in DEFECT_TYPES for lv in levels] + ["fastener_roi", "fastener_tie"]:
        for f in fp_rates:
            row = {"condition": name, "fp_per_mile": f"{f:g}"}
            for lab in labels:
                r = runs[lab].get(name, {})
                row[lab] = r["pd"][str(f)] if r.get("auc") is not None else float("nan")
            rows.append(row)
    table = summary_table(rows, ("condition", "fp_per_mile", *labels))
    (out / "summary.txt").write_text(f"subset: {subset}\n\n{headline_table(runs)}\n{table}")
    (out / "summary.json").write_text(summary_json({"subset": subset, "runs": runs}))
    log.info("evaluation of %s written to %s", ", ".join(labels), out)
    return out, runs


def headline_table(runs):
    """Material accuracy, fastener AUCs and the fastener operating point per run."""
    def fmt(v, pct=True):
        if v is None:
            return "n/a"
        return f"{100 * v:.2f}%" if pct else f"{v:.4f}"

    labels = list(runs)
    rows = [("material accuracy", [fmt(runs[k].get("material_site_accuracy")) for k in labels]),
            ("fastener ROI AUC", [fmt(runs[k]["fastener_roi"]["auc"], False) for k in labels]),
            ("fastener tie AUC", [fmt(runs[k]["fastener_tie"]["auc"], False) for k in labels]),
            ("fastener tie PD at tau", [fmt(runs[k]["fastener_operating_point"]["pd"]) for k in labels]),
            ("fastener tie PFA at tau", [fmt(runs[k]["fastener_operating_point"]["pfa"]) for k in labels])]
    width = max(len(r[0]) for r in rows)
    cols = [max(len(k), *(len(r[1][i]) for r in rows)) for i, k in enumerate(labels)]
    lines = ["  ".join(["metric".ljust(width)] + [k.ljust(c) for k, c in zip(labels, cols)])]
    lines += ["  ".join([name.ljust(width)] + [v.ljust(c) for v, c in zip(vals, cols)]) for name, vals in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


# -- report -------------------------------------------------------------------------

PER_MILE_FIELDS = ("mile_id", "ties", "inspected", "defective_fastener_ties", "defective_rois",
                   "crumbling_alarms", "chipped_alarms")


def per_mile_counts(ties):
    miles = {}
    for t in ties:
        m = miles.setdefault(t["mile_id"], dict.fromkeys(PER_MILE_FIELDS[1:], 0))
        m["ties"] += 1
        m["inspected"] += t["score"] is not None
        m["defective_fastener_ties"] += t["verdict"] == "defective"
        m["defective_rois"] += sum(r["verdict"] == "defective" for r in t["rois"])
        for k in DEFECT_TYPES:
            m[f"{k}_alarms"] += bool(t["flags"].get(f"{k}_alarm"))
    return miles


def cmd_report(cfg, verdict_dir, eval_dir=None, out=None):
    """Per-mile defect summary (text + CSV), defect list, and plots."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vd = Path(verdict_dir)
    ties = read_verdicts(vd) if (vd / "verdicts.jsonl").is_file() or vd.is_file() else []
    out = Path(out) if out else cfg.path("reports") / "report"
    out.mkdir(parents=True, exist_ok=True)
    miles = per_mile_counts(ties)
    with open(out / "per_mile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_MILE_FIELDS)
        for mile in sorted(miles):
            w.writerow([mile] + [miles[mile][k] for k in PER_MILE_FIELDS[1:]])
    with open(out / "defects.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mile_id", "tie_id", "kind", "detail", "score"])
        for t in ties:
            for r in t["rois"]:
                if r["verdict"] == "defective":
                    w.writerow([t["mile_id"], t["tie_id"], "fastener", r["name"], repr(r["score"])])
            for k in DEFECT_TYPES:
                if t["flags"].get(f"{k}_alarm"):
                    w.writerow([t["mile_id"], t["tie_id"], "tie", k, repr(t[f"s_{k}"])])
    lines = ["per-mile inspection summary", ""]
    if not miles:
        lines.append("no verdicts")
    for mile in sorted(miles):
        m = miles[mile]
        lines.append(f"{mile}: {m['ties']} ties, {m['inspected']} inspected, "
                     f"{m['defective_fastener_ties']} with defective fasteners ({m['defective_rois']} ROIs), "
                     f"{m['crumbling_alarms']} crumbling and {m['chipped_alarms']} chipped alarms")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if miles:
        names = sorted(miles)
        x = np.arange(len(names))
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3.5))
        for k, key in enumerate(("defective_fastener_ties", "crumbling_alarms", "chipped_alarms")):
            ax.bar(x + (k - 1) * 0.27, [miles[n][key] for n in names], 0.27, label=key.replace("_", " "))
        ax.set_xticks(x, names, rotation=45, ha="right")
        ax.set_ylabel("count")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "per_mile.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
    if eval_dir is not None:
        _plot_rocs(plt, Path(eval_dir), out)
    log.info("report for %d ties in %d miles written to %s", len(ties), len(miles), out)
    return out


def _plot_rocs(plt, eval_dir, out):
    groups = {}
    for path in sorted(eval_dir.glob("*_roc_*.csv")):
        label, name = path.stem.split("_roc_", 1)
        groups.setdefault(name, []).append((label, path))
    for name, items in groups.items():
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for label, path in items:
            with open(path) as fh:
                rows = list(csv.DictReader(fh))
            ax.step([float(r["fp_per_mile"]) for r in rows], [float(r["tpr"]) for r in rows], where="post",
                    label=label)
        ax.set_xscale("symlog", linthresh=1)
        ax.set_xlabel("false positives per mile")
        ax.set_ylabel("detection rate")
        ax.set_title(name)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"roc_{name}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
