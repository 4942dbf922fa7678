from advlab.tensor_core.graph import (
    ComputeGraph,
    GraphBuilder,
    GraphError,
    Node,
    NonFiniteError,
    Ref,
    ShapeError,
    Tensor,
    UnboundNameError,
    forward,
    gradient,
    tensor,
    value_and_gradient,
)
from advlab.tensor_core import rten

__all__ = [
    "ComputeGraph", "GraphBuilder", "GraphError", "Node", "NonFiniteError", "Ref",
    "ShapeError", "Tensor", "UnboundNameError", "forward", "gradient", "tensor",
    "value_and_gradient", "rten",
]
