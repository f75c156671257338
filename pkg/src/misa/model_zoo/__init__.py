from .gradcheck import count_stored_activation_elems, finite_difference_grad, relative_error
from .tasks import TASKS, CopyTask, QuadraticTask, QuarticTask, Task, make_task, synthetic_tasks, transformer_description
from .transformer import (
    FROZEN_CACHE,
    TransformerLayerParams,
    cache_elements,
    cache_fields,
    layer_backward,
    layer_forward,
    layernorm,
    layernorm_backward,
    softmax,
    softmax_backward,
)

__all__ = [
    "TASKS", "CopyTask", "FROZEN_CACHE", "QuadraticTask", "QuarticTask", "Task", "TransformerLayerParams",
    "cache_elements", "cache_fields", "count_stored_activation_elems", "finite_difference_grad",
    "layer_backward", "layer_forward", "layernorm", "layernorm_backward", "make_task",
    "relative_error", "softmax", "softmax_backward", "synthetic_tasks", "transformer_description",
]
