"""Dense tensors, reverse-mode gradients over static op graphs, AdamW."""
from .graph import (GradCheckReport, Gradients, Graph, ModelParams, Node, ParamFactory, Trace,
                    backprop, evaluate, forward, grad_check, init_uniform)
from .ops import OPS, ShapeError
from .optim import NonFiniteGradient, OptimizerState, adam_step, cosine_lr

__all__ = [
    "GradCheckReport", "Gradients", "Graph", "ModelParams", "Node", "ParamFactory", "Trace",
    "backprop", "evaluate", "forward", "grad_check", "init_uniform", "OPS", "ShapeError",
    "NonFiniteGradient", "OptimizerState", "adam_step", "cosine_lr",
]
