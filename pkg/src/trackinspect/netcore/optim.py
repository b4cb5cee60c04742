"""Learnable layer parameters, SGD with momentum, and the step learning-rate schedule."""

from dataclasses import dataclass, field

import numpy as np

from .. import NumericError


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray
    lr_multiplier: float = 1.0
    wd_multiplier: float = 1.0
    v_weights: np.ndarray = field(default=None, repr=False)
    v_biases: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr_multiplier <= 0 or self.wd_multiplier <= 0:
            raise ValueError("layer multipliers must be positive")
        if self.v_weights is None:
            self.v_weights = np.zeros_like(self.weights)
        if self.v_biases is None:
            self.v_biases = np.zeros_like(self.biases)

    def copy(self):
        return LayerParams(self.weights.copy(), self.biases.copy(), self.lr_multiplier,
                           self.wd_multiplier, self.v_weights.copy(), self.v_biases.copy())


def he_uniform(shape, rng, dtype=np.float64):
    """Zero-mean uniform init with standard deviation sqrt(2 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(3.0) * np.sqrt(2.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=5e-5):
    """In-place momentum SGD over a dict of LayerParams.

    grads maps layer name -> (dweights, dbiases). Biases carry no weight decay.
    Raises NumericError on a non-finite gradient before touching any parameter.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, (gw, gb) in grads.items():
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {name!r}")
    for name, (gw, gb) in grads.items():
        p = params[name]
        step = lr * p.lr_multiplier
        decay = weight_decay * p.wd_multiplier
        p.v_weights *= momentum
        p.v_weights -= step * (gw + decay * p.weights)
        p.weights += p.v_weights
        p.v_biases *= momentum
        p.v_biases -= step * gb
        p.biases += p.v_biases
    return params


def lr_schedule(iteration, base=0.01, decay=0.5, step=30000):
    return base * decay ** (iteration // step)
