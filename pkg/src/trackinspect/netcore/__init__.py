from .kernels import (conv2d_valid, conv2d_backward, conv_output_size, maxpool, maxpool_backward,
                      global_maxpool, global_maxpool_backward, relu, relu_backward, dropout,
                      dropout_backward, softmax_xent, hinge_forward_backward)
from .optim import LayerParams, he_uniform, sgd_step, lr_schedule
from .gradcheck import finite_diff_check, numeric_gradient, relative_error
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "conv2d_valid", "conv2d_backward", "conv_output_size", "maxpool", "maxpool_backward",
    "global_maxpool", "global_maxpool_backward", "relu", "relu_backward", "dropout",
    "dropout_backward", "softmax_xent", "hinge_forward_backward", "LayerParams", "he_uniform",
    "sgd_step", "lr_schedule", "finite_diff_check", "numeric_gradient", "relative_error",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
