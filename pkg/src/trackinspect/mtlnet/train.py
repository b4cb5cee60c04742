"""SGD training loop for the multi-task network and its single-task variants."""

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import ConfigError, NumericError
from ..netcore import load_checkpoint, lr_schedule, save_checkpoint, sgd_step
from .data import BatchComposer, BatchSizes
from .loss import TaskWeights, mtl_loss
from .model import NetConfig, model_from_tensors, model_tensors

log = logging.getLogger(__name__)

MODES = ("mtl", "stl-material", "stl-fastener")
MATERIAL_LAYERS = ("conv1", "conv2", "conv3", "conv4_t")
FASTENER_LAYERS = ("conv1", "conv2", "conv3", "conv4_f", "conv5_coarse", "conv5_svm")

# stream ids for per-iteration generators: default_rng([seed, stream, iteration])
STREAM_BATCH, STREAM_DROPOUT_MATERIAL, STREAM_DROPOUT_FASTENER = 1, 2, 3


@dataclass
class TrainConfig:
    iterations: int = 300_000
    base_lr: float = 0.01
    lr_decay: float = 0.5
    lr_step: int = 30_000
    momentum: float = 0.9
    weight_decay: float = 5e-5
    log_every: int = 10
    checkpoint_every: int = 0
    mode: str = "mtl"
    batch: BatchSizes = field(default_factory=BatchSizes)
    weights: TaskWeights = field(default_factory=TaskWeights)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0 or self.base_lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if self.lr_step < 1 or not 0 < self.lr_decay <= 1 or self.log_every < 1:
            raise ConfigError("invalid schedule settings")


def stl_config(cfg, task, material_batch=64):
    """Single-task variant of a training config: one head, the other tasks off.

    The material variant draws ``material_batch`` patches per step; pass
    None to keep the multi-task run's material batch.
    """
    if task == "material":
        sizes = replace(cfg.batch, coarse=0)
        if material_batch is not None:
            sizes = replace(sizes, material=int(material_batch))
        return replace(cfg, mode="stl-material", batch=sizes, weights=TaskWeights(1.0, 0.0, 0.0))
    if task == "fastener":
        return replace(cfg, mode="stl-fastener", batch=replace(cfg.batch, material=0),
                       weights=replace(cfg.weights, material=0.0))
    raise ConfigError(f"unknown single task {task!r}")


def _active_layers(mode):
    if mode == "stl-material":
        return MATERIAL_LAYERS
    if mode == "stl-fastener":
        return FASTENER_LAYERS
    return None


def iteration_rngs(seed, iteration):
    return (np.random.default_rng([seed, STREAM_BATCH, iteration]),
            {"dropout_material": np.random.default_rng([seed, STREAM_DROPOUT_MATERIAL, iteration]),
             "dropout_fastener": np.random.default_rng([seed, STREAM_DROPOUT_FASTENER, iteration])})


def train(model, pools, cfg=None, seed=0, start_iteration=0, checkpoint_path=None, meta=None,
          composer=None, on_log=None):
    """Run ``cfg.iterations`` SGD steps starting at ``start_iteration``.

    The model is updated in place and returned with the loss trace: one dict
    per logged iteration with the learning rate, Phi and the unweighted task
    losses averaged over the logging window. Iteration i draws its batch and
    dropout masks from generators seeded by (seed, stream, i), so a resumed
    run reproduces an uninterrupted one.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    # the mode decides which samples are drawn at all
    sizes, n_svm = cfg.batch, model.cfg.n_svm
    if cfg.mode == "stl-material":
        sizes, n_svm = replace(sizes, coarse=0), 0
    elif cfg.mode == "stl-fastener":
        sizes = replace(sizes, material=0)
    composer = composer or BatchComposer(pools, sizes, n_svm)
    active = _active_layers(cfg.mode)
    trace = []
    window = {"phi": [], "material": [], "coarse": [], "svm": []}
    end = start_iteration + cfg.iterations
    for it in range(start_iteration, end):
        rng, rngs = iteration_rngs(seed, it)
        batch = composer.compose(rng, batch_id=it)
        phi, grads, parts = mtl_loss(model, batch, cfg.weights, train=True, rngs=rngs)
        if not math.isfinite(phi):
            raise NumericError(f"non-finite loss at iteration {it} (batch {batch.batch_id})")
        if active is not None:
            grads = {k: v for k, v in grads.items() if k in active}
        lr = lr_schedule(it, cfg.base_lr, cfg.lr_decay, cfg.lr_step)
        sgd_step(model.params, grads, lr, cfg.momentum, cfg.weight_decay)
        window["phi"].append(phi)
        for k in ("material", "coarse", "svm"):
            if k in parts:
                window[k].append(parts[k])
        done = it + 1
        if done % cfg.log_every == 0 or done == end:
            row = {"iteration": done, "lr": lr}
            for k, v in window.items():
                row[k] = float(np.mean(v)) if v else float("nan")
            trace.append(row)
            log.info("iter %d lr %.5g phi %.4f material %.4f coarse %.4f svm %.4f", done, lr,
                     row["phi"], row["material"], row["coarse"], row["svm"])
            if on_log:
                on_log(row)
            window = {k: [] for k in window}
        if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_model(checkpoint_path, model, done, meta)
    if checkpoint_path:
        save_model(checkpoint_path, model, end, meta)
    return model, trace


def train_stl(model, pools, cfg=None, task="material", **kw):
    return train(model, pools, stl_config(cfg or TrainConfig(), task), **kw)


TRACE_FIELDS = ("iteration", "lr", "phi", "material", "coarse", "svm")


def write_trace_csv(path, trace, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["iteration"], f"{row['lr']:.8g}"] + [f"{row[k]:.8g}" for k in TRACE_FIELDS[2:]])


def save_model(path, model, iteration, meta=None):
    info = dict(meta or {})
    info["iteration"] = int(iteration)
    info["net"] = model.cfg.to_dict()
    save_checkpoint(path, model_tensors(model), model.arch(), info)


def load_model(path):
    """Returns (model, meta) with the architecture recorded in the checkpoint."""
    tensors, meta, _ = load_checkpoint(path)
    if "net" not in meta:
        raise ConfigError(f"{path}: checkpoint has no architecture record")
    net = NetConfig(**meta["net"])
    model = model_from_tensors(net, tensors)
    load_checkpoint(path, model.arch())  # verifies the stored architecture hash
    return model, meta
