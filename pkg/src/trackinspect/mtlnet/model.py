"""Shared-trunk fully convolutional network with material, coarse-fastener and SVM heads.

Layout (valid convolutions, 3x3 max pools):

    input -> conv1 -> relu -> pool/2 -> conv2 -> relu -> pool/2 -> conv3 -> relu -> pool/2
          -> dropout                                        (shared trunk, stride 8, RF 43)
    trunk -> conv4_t -> pool/2                              (material scores, stride 16, RF 75)
    trunk -> conv4_f -> relu -> dropout = X                 (fastener features, 8x8 grid on 182 px)
          X -> conv5_svm (1x1)                              (K binary SVM scores per grid cell)
          X -> pool/1 -> conv5_coarse (1x1) -> global max   (5 coarse logits)
"""

from dataclasses import asdict, dataclass

import numpy as np

from .. import ConfigError
from ..imaging import FASTENER_WINDOW, MATERIAL_PATCH, ClassCatalog
from ..netcore import (
    LayerParams, conv2d_backward, conv2d_valid, dropout, dropout_backward, global_maxpool,
    global_maxpool_backward, he_uniform, maxpool, maxpool_backward, relu, relu_backward,
)


@dataclass(frozen=True)
class NetConfig:
    k1: int = 5
    k2: int = 5
    k3: int = 5
    k4_material: int = 3
    k4_fastener: int = 11
    c1: int = 64
    c2: int = 128
    c3: int = 256
    c4_fastener: int = 512
    n_material: int = 10
    n_coarse: int = 5
    n_svm: int = 32
    pool: int = 3
    dropout_trunk: float = 0.1
    dropout_fastener: float = 0.2
    wd_mult_fastener4: float = 10.0
    wd_mult_fastener5: float = 100.0

    def to_dict(self):
        return asdict(self)


def material_geometry(cfg):
    """(total stride, receptive field) of the material path."""
    stride, rf = 1, 1
    for k, s in ((cfg.k1, 1), (cfg.pool, 2), (cfg.k2, 1), (cfg.pool, 2), (cfg.k3, 1), (cfg.pool, 2),
                 (cfg.k4_material, 1), (cfg.pool, 2)):
        rf += (k - 1) * stride
        stride *= s
    return stride, rf


def trunk_geometry(cfg):
    stride, rf = 1, 1
    for k, s in ((cfg.k1, 1), (cfg.pool, 2), (cfg.k2, 1), (cfg.pool, 2), (cfg.k3, 1), (cfg.pool, 2)):
        rf += (k - 1) * stride
        stride *= s
    return stride, rf


def validate_config(cfg):
    stride, rf = material_geometry(cfg)
    if (stride, rf) != (16, MATERIAL_PATCH):
        raise ConfigError(f"material path must have stride 16 and receptive field 75, got ({stride}, {rf})")
    if min(cfg.c1, cfg.c2, cfg.c3, cfg.c4_fastener, cfg.n_svm) < 1:
        raise ConfigError("layer widths must be positive")
    for r in (cfg.dropout_trunk, cfg.dropout_fastener):
        if not 0 <= r < 1:
            raise ConfigError("dropout ratios must lie in [0, 1)")


def map_size(n, cfg=None):
    """Material score-map length for an input length n (n >= 75)."""
    return (n - MATERIAL_PATCH) // 16 + 1


class MTLNet:
    """Parameter container plus forward/backward passes for every head."""

    layer_names = ("conv1", "conv2", "conv3", "conv4_t", "conv4_f", "conv5_coarse", "conv5_svm")

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @property
    def dtype(self):
        return self.params["conv1"].weights.dtype

    def arch(self):
        return {"net": self.cfg.to_dict(), "format": "trackinspect-mtlnet-1"}

    def copy(self):
        return MTLNet(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        out = self.copy()
        for p in out.params.values():
            p.weights = p.weights.astype(dtype)
            p.biases = p.biases.astype(dtype)
            p.v_weights = p.v_weights.astype(dtype)
            p.v_biases = p.v_biases.astype(dtype)
        return out

    # -- trunk ----------------------------------------------------------------
    def trunk_forward(self, x, train=False, rng=None):
        # channel-major internally; NCHW at the boundaries
        p = self.params
        caches = []
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        for name in ("conv1", "conv2", "conv3"):
            h, c_conv = conv2d_valid(h, p[name].weights, p[name].biases, layout="CNHW")
            h, c_relu = relu(h)
            h, c_pool = maxpool(h, self.cfg.pool, 2)
            caches.append((c_conv, c_relu, c_pool))
        h, mask = dropout(h, self.cfg.dropout_trunk, train, rng)
        return np.ascontiguousarray(h.transpose(1, 0, 2, 3)), (caches, mask)

    def trunk_backward(self, d, cache, grads, need_dx=False):
        caches, mask = cache
        d = dropout_backward(np.ascontiguousarray(d.transpose(1, 0, 2, 3)), mask)
        for name, (c_conv, c_relu, c_pool) in zip(("conv3", "conv2", "conv1"), reversed(caches)):
            d = maxpool_backward(d, c_pool)
            d = relu_backward(d, c_relu)
            d, dw, db = conv2d_backward(d, c_conv, need_dx=need_dx or name != "conv1")
            _accumulate(grads, name, dw, db)
        return None if d is None else np.ascontiguousarray(d.transpose(1, 0, 2, 3))

    # -- material head --------------------------------------------------------
    def material_forward(self, f3):
        p = self.params["conv4_t"]
        s, c_conv = conv2d_valid(f3, p.weights, p.biases)
        s, c_pool = maxpool(s, self.cfg.pool, 2)
        return s, (c_conv, c_pool)

    def material_backward(self, d, cache, grads):
        c_conv, c_pool = cache
        d = maxpool_backward(d, c_pool)
        d, dw, db = conv2d_backward(d, c_conv)
        _accumulate(grads, "conv4_t", dw, db)
        return d

    # -- fastener heads -------------------------------------------------------
    def fastener_features(self, f3, train=False, rng=None):
        p = self.params["conv4_f"]
        h, c_conv = conv2d_valid(f3, p.weights, p.biases)
        h, c_relu = relu(h)
        x, mask = dropout(h, self.cfg.dropout_fastener, train, rng)
        return x, (c_conv, c_relu, mask)

    def fastener_features_backward(self, d, cache, grads):
        c_conv, c_relu, mask = cache
        d = dropout_backward(d, mask)
        d = relu_backward(d, c_relu)
        d, dw, db = conv2d_backward(d, c_conv)
        _accumulate(grads, "conv4_f", dw, db)
        return d

    def svm_scores(self, x):
        p = self.params["conv5_svm"]
        return np.einsum("nfhw,kf->nkhw", x, p.weights[:, :, 0, 0], optimize=True) + p.biases[:, None, None]

    def coarse_forward(self, x):
        p = self.params["conv5_coarse"]
        h, c_pool = maxpool(x, self.cfg.pool, 1)
        h, c_conv = conv2d_valid(h, p.weights, p.biases)
        logits, c_gmax = global_maxpool(h)
        return logits, (c_pool, c_conv, c_gmax)

    def coarse_backward(self, d, cache, grads):
        c_pool, c_conv, c_gmax = cache
        d = global_maxpool_backward(d, c_gmax)
        d, dw, db = conv2d_backward(d, c_conv)
        _accumulate(grads, "conv5_coarse", dw, db)
        return maxpool_backward(d, c_pool)

    # -- convenience inference ----------------------------------------------
    def material_scores(self, x):
        f3, _ = self.trunk_forward(x)
        return self.material_forward(f3)[0]

    def fastener_outputs(self, x):
        """Eval-mode (X grid, SVM score grid, coarse logits) for fastener windows."""
        f3, _ = self.trunk_forward(x)
        feats, _ = self.fastener_features(f3)
        logits, _ = self.coarse_forward(feats)
        return feats, self.svm_scores(feats), logits


def _accumulate(grads, name, dw, db):
    if name in grads:
        gw, gb = grads[name]
        grads[name] = (gw + dw, gb + db)
    else:
        grads[name] = (dw, db)


def build_network(cfg=None, catalog=None, seed=0, dtype=np.float32):
    cfg = cfg or NetConfig()
    validate_config(cfg)
    catalog = catalog or ClassCatalog(n_svm_outputs=cfg.n_svm)
    if cfg.n_svm < 2 * len(catalog.fastener):
        raise ConfigError(f"n_svm={cfg.n_svm} cannot hold a b/f pair for {len(catalog.fastener)} classes")
    rng = np.random.default_rng(seed)
    shapes = {
        "conv1": (cfg.c1, 1, cfg.k1, cfg.k1),
        "conv2": (cfg.c2, cfg.c1, cfg.k2, cfg.k2),
        "conv3": (cfg.c3, cfg.c2, cfg.k3, cfg.k3),
        "conv4_t": (cfg.n_material, cfg.c3, cfg.k4_material, cfg.k4_material),
        "conv4_f": (cfg.c4_fastener, cfg.c3, cfg.k4_fastener, cfg.k4_fastener),
        "conv5_coarse": (cfg.n_coarse, cfg.c4_fastener, 1, 1),
        "conv5_svm": (cfg.n_svm, cfg.c4_fastener, 1, 1),
    }
    wd = {"conv4_f": cfg.wd_mult_fastener4, "conv5_coarse": cfg.wd_mult_fastener5,
          "conv5_svm": cfg.wd_mult_fastener5}
    params = {}
    for name in MTLNet.layer_names:
        shape = shapes[name]
        params[name] = LayerParams(he_uniform(shape, rng, dtype), np.zeros(shape[0], dtype=dtype),
                                   wd_multiplier=wd.get(name, 1.0))
    return MTLNet(cfg, params)


def model_tensors(model, with_velocity=True):
    out = {}
    for name, p in model.params.items():
        out[f"{name}/weights"] = p.weights
        out[f"{name}/biases"] = p.biases
        if with_velocity:
            out[f"{name}/v_weights"] = p.v_weights
            out[f"{name}/v_biases"] = p.v_biases
    return out


def model_from_tensors(cfg, tensors, dtype=np.float32):
    wd = {"conv4_f": cfg.wd_mult_fastener4, "conv5_coarse": cfg.wd_mult_fastener5,
          "conv5_svm": cfg.wd_mult_fastener5}
    params = {}
    for name in MTLNet.layer_names:
        w = tensors[f"{name}/weights"].astype(dtype)
        b = tensors[f"{name}/biases"].astype(dtype)
        vw = tensors.get(f"{name}/v_weights")
        vb = tensors.get(f"{name}/v_biases")
        params[name] = LayerParams(w, b, wd_multiplier=wd.get(name, 1.0),
                                   v_weights=None if vw is None else vw.astype(dtype),
                                   v_biases=None if vb is None else vb.astype(dtype))
    return MTLNet(cfg, params)
