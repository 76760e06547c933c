"""SGD with momentum."""

from typing import Iterable, List

import numpy as np
from loguru import logger

from .exceptions import MissingGradientError
from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0) -> None:
    """v <- momentum * v + grad; p <- p - lr * v; then clear gradients."""
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(
            f"no gradient for {len(missing)} parameter(s): {', '.join(missing[:5])}",
            error_code="MISSING_GRAD",
            details={"parameters": missing},
        )
    for p in params:
        if p.momentum_buffer is None:
            p.momentum_buffer = np.zeros_like(p.data)
        p.momentum_buffer = momentum * p.momentum_buffer + p.grad
        p.data = p.data - lr * p.momentum_buffer
        p.grad = None


class SGD:
    """Stateful wrapper holding the parameter list and hyper-parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.momentum = momentum
        logger.debug(f"SGD over {len(self.params)} parameters (lr={lr}, momentum={momentum})")

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum)
