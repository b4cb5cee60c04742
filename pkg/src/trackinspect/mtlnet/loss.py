"""Global multi-task objective and its gradients."""

from dataclasses import dataclass, field

import numpy as np

from ..netcore import hinge_forward_backward, softmax_xent
from .model import trunk_geometry


@dataclass
class TaskWeights:
    material: float = 1.0
    coarse: float = 1.0
    svm: float = None  # per SVM head; None means 1/K

    def svm_weight(self, n_svm):
        return 1.0 / n_svm if self.svm is None else self.svm


@dataclass
class TrainBatch:
    material_x: np.ndarray
    material_y: np.ndarray
    coarse_x: np.ndarray
    coarse_y: np.ndarray
    svm_x: np.ndarray
    svm_head: np.ndarray
    svm_y: np.ndarray
    difficult: np.ndarray = None
    batch_id: int = 0
    meta: dict = field(default_factory=dict)
    svm_center: np.ndarray = None  # annotated center per SVM window (row, col); NaN when unknown


def annotated_cell(cfg, center, grid_shape):
    """Grid cell whose receptive field is centered nearest an annotated pixel position."""
    stride, rf = trunk_geometry(cfg)
    offset = (rf - 1 + (cfg.k4_fastener - 1) * stride) / 2
    return tuple(int(np.clip(np.floor((c - offset) / stride + 0.5), 0, n - 1)) for c, n in zip(center, grid_shape))


def align_cell(svm_grid, head, y=-1, center=None, cfg=None):
    """Grid cell used by one binary task sample.

    Positives with an annotation use the cell centered on the object.
    Negatives take the cell where the task's own detector fires strongest
    (the hardest negative, matching the max over cells at test time).
    Unannotated positives fall back to the class-vs-background peak.
    Ties resolve to the first cell in raster order.
    """
    if y == 1 and center is not None and np.all(np.isfinite(center)):
        return annotated_cell(cfg, center, svm_grid.shape[-2:])
    pick = head if y != 1 else head - head % 2
    flat = int(np.argmax(svm_grid[pick].ravel()))
    return divmod(flat, svm_grid.shape[-1])


def svm_task_loss(model, feats, head, y, weight, centers=None):
    """Hinge loss over one window per task. Returns (loss, dW, db, dfeats)."""
    p = model.params["conv5_svm"]
    w_all = p.weights[:, :, 0, 0]
    scores = model.svm_scores(feats)
    dfeats = np.zeros_like(feats)
    dw = np.zeros_like(p.weights)
    db = np.zeros_like(p.biases)
    total = 0.0
    for j in range(feats.shape[0]):
        k = int(head[j])
        r, c = align_cell(scores[j], k, int(y[j]), None if centers is None else centers[j], model.cfg)
        x = feats[j, :, r, c]
        loss, gw, gb, gx = hinge_forward_backward(w_all[k], p.biases[k], 0.0, x, int(y[j]))
        total += weight * loss
        dw[k, :, 0, 0] += weight * gw
        db[k] += weight * gb
        dfeats[j, :, r, c] += weight * gx
    return total, dw, db, dfeats


def mtl_loss(model, batch, weights=None, train=False, rngs=None):
    """Phi = sum_t lambda_t * E_t and its gradient for every layer.

    Softmax tasks contribute their batch-mean cross-entropy; each SVM head
    contributes the hinge loss of its own sample. Tasks with zero weight are
    skipped entirely, and their layers receive exact zero gradients.
    Returns (phi, grads, parts) where parts holds the unweighted task losses.
    """
    weights = weights or TaskWeights()
    rngs = rngs or {}
    grads = {}
    parts = {}
    phi = 0.0
    lam_svm = weights.svm_weight(model.cfg.n_svm)

    if weights.material and len(batch.material_y):
        f3, c_trunk = model.trunk_forward(batch.material_x, train, rngs.get("dropout_material"))
        scores, c_head = model.material_forward(f3)
        logits = scores[:, :, 0, 0]
        loss, dlogits = softmax_xent(logits, batch.material_y)
        parts["material"] = loss
        phi += weights.material * loss
        d = (weights.material * dlogits)[:, :, None, None].astype(scores.dtype)
        d = model.material_backward(d, c_head, grads)
        model.trunk_backward(d, c_trunk, grads)

    use_coarse = bool(weights.coarse) and len(batch.coarse_y) > 0
    use_svm = bool(lam_svm) and len(batch.svm_y) > 0
    if use_coarse or use_svm:
        xs = []
        if use_coarse:
            xs.append(batch.coarse_x)
        if use_svm:
            xs.append(batch.svm_x)
        x = np.concatenate(xs) if len(xs) > 1 else xs[0]
        f3, c_trunk = model.trunk_forward(x, train, rngs.get("dropout_fastener"))
        feats, c_feat = model.fastener_features(f3, train, rngs.get("dropout_fastener"))
        dfeats = np.zeros_like(feats)
        nc = len(batch.coarse_y) if use_coarse else 0
        if use_coarse:
            logits, c_coarse = model.coarse_forward(feats[:nc])
            loss, dlogits = softmax_xent(logits, batch.coarse_y)
            parts["coarse"] = loss
            phi += weights.coarse * loss
            dfeats[:nc] += model.coarse_backward((weights.coarse * dlogits).astype(feats.dtype), c_coarse, grads)
        if use_svm:
            loss, dw, db, dsvm = svm_task_loss(model, feats[nc:], batch.svm_head, batch.svm_y, lam_svm,
                                                   batch.svm_center)
            parts["svm"] = loss / lam_svm / len(batch.svm_y)
            phi += loss
            grads["conv5_svm"] = (dw, db)
            dfeats[nc:] += dsvm
        d = model.fastener_features_backward(dfeats, c_feat, grads)
        model.trunk_backward(d, c_trunk, grads)

    for name, p in model.params.items():
        if name not in grads:
            grads[name] = (np.zeros_like(p.weights), np.zeros_like(p.biases))
    return phi, grads, parts
