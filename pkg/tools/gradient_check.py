"""
Central finite differences, used as the gradient fallback for denoisers
without a vector-Jacobian product and as the oracle for checking analytic
gradients.
"""
from typing import Callable, Optional

import torch


def default_step(x: torch.Tensor) -> float:
    return 1e-4 * (1.0 + float(x.abs().max()))


def central_difference_gradient(
    func: Callable[[torch.Tensor], float], x: torch.Tensor, eps: Optional[float] = None
) -> torch.Tensor:
    """Gradient of a scalar function by centered differences, one coordinate at a time."""
    eps = default_step(x) if eps is None else eps
    flat = x.reshape(-1).clone()
    grad = torch.zeros_like(flat)
    for j in range(flat.numel()):
        x0 = float(flat[j])
        flat[j] = x0 + eps
        fplus = func(flat.reshape(x.shape))
        flat[j] = x0 - eps
        fminus = func(flat.reshape(x.shape))
        flat[j] = x0
        grad[j] = (fplus - fminus) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / scale
