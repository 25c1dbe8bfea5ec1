from . import autodiff
from .autodiff import NumericError, Parameter, Tensor
from .gradcheck import GradCheckReport, grad_check
from .layers import MLP, EncoderDecoder, Linear
from .optim import SGD

__all__ = [
    "autodiff",
    "EncoderDecoder",
    "GradCheckReport",
    "Linear",
    "MLP",
    "NumericError",
    "Parameter",
    "SGD",
    "Tensor",
    "grad_check",
]
