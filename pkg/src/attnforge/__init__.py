"""Parameter-efficient attention adaptation on a minimal numpy vision transformer."""
from ._backend import BACKEND
from .errors import ContractError, DegenerateRowError, FormulaInapplicableError, ShapeError
from .peft import AdapterSpec, closed_form_count, exact_param_count, instantiate, merge
from .tensor import Tensor, backward, grad_check, no_grad
from .transformer import ModelConfig, ViT

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AdapterSpec", "ContractError", "DegenerateRowError", "FormulaInapplicableError",
    "ModelConfig", "ShapeError", "Tensor", "ViT", "backward", "closed_form_count",
    "exact_param_count", "grad_check", "instantiate", "merge", "no_grad",
]
