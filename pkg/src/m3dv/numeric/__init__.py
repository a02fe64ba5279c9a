from . import ops
from .gradcheck import (EvaluationError, Replay, analytic_gradients, check_gradients, numeric_gradients,
                        replay_numeric_gradients)
from .nn import MLP, Adam, LayerNorm, Linear, Module, param
from .ops import DegenerateRowError, masked_softmax, matmul
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, no_grad

__all__ = [
    "Adam", "DegenerateRowError", "EvaluationError", "LayerNorm", "Linear", "MLP", "Module",
    "NonFiniteError", "Replay", "ShapeError", "Tape", "Tensor", "analytic_gradients", "as_tensor",
    "check_gradients", "masked_softmax", "matmul", "no_grad", "numeric_gradients", "ops", "param",
    "replay_numeric_gradients",
]
