from . import autodiff
from .autodiff import UnsupportedPrimitive, backward, softmax_rows, value_and_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .network import Network, forward, forward_graph, predict_proba
from .optim import AdamState, adam_step, ema_update
from .params import ParamSet, check_compatible

__all__ = [
    "AdamState",
    "CheckpointError",
    "Network",
    "ParamSet",
    "UnsupportedPrimitive",
    "adam_step",
    "autodiff",
    "backward",
    "check_compatible",
    "ema_update",
    "forward",
    "forward_graph",
    "grad_check",
    "load_checkpoint",
    "predict_proba",
    "save_checkpoint",
    "softmax_rows",
    "value_and_grad",
]
