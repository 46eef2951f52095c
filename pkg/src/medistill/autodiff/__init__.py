from medistill.autodiff import functional
from medistill.autodiff.tensor import (
    NUMERIC_MODES,
    Tensor,
    as_tensor,
    get_dtype,
    get_mode,
    is_grad_enabled,
    no_grad,
    numeric_mode,
    parameter,
    set_mode,
)

__all__ = [
    "NUMERIC_MODES",
    "Tensor",
    "as_tensor",
    "functional",
    "get_dtype",
    "get_mode",
    "is_grad_enabled",
    "no_grad",
    "numeric_mode",
    "parameter",
    "set_mode",
]
