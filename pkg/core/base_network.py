"""Base network class with common parameter handling."""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import CheckpointFormatError
from .rng import conv_fans, glorot_uniform
from .tensor import Parameter


class BaseNetwork(ABC):
    """Base class for every trainable model in the pipeline.

    Parameters live in an insertion-ordered registry; names are unique and
    prefixed with the network type so several networks can share a checkpoint.
    """

    def __init__(self, network_type: str, config: Optional[Any] = None):
        self.network_type = network_type
        self.config = config
        self._params: Dict[str, Parameter] = {}

    @abstractmethod
    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Run the network on its inputs."""
        pass

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    # -- parameter registry ---------------------------------------------

    def add_parameter(self, name: str, data: np.ndarray) -> Parameter:
        full_name = f"{self.network_type}.{name}"
        if full_name in self._params:
            raise ValueError(f"parameter {full_name!r} already registered")
        param = Parameter(data, name=full_name)
        self._params[full_name] = param
        return param

    def add_conv(self, name: str, rng: np.random.Generator, shape: Sequence[int], transposed: bool = False) -> Dict[str, Parameter]:
        """Glorot-initialized kernel plus zero bias; transposed kernels are (I_in, C_out, kh, kw)."""
        fan_in, fan_out = conv_fans(shape)
        if transposed:
            fan_in, fan_out = fan_out, fan_in
        out_channels = shape[1] if transposed else shape[0]
        return {
            "weight": self.add_parameter(f"{name}.weight", glorot_uniform(rng, shape, fan_in, fan_out)),
            "bias": self.add_parameter(f"{name}.bias", np.zeros(out_channels)),
        }

    def add_subnetwork(self, network: "BaseNetwork") -> "BaseNetwork":
        """Share a child network's parameters through this registry (names keep the child's prefix)."""
        clash = set(network._params) & set(self._params)
        if clash:
            raise ValueError(f"parameters already registered: {sorted(clash)}")
        self._params.update(network._params)
        return network

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> Iterator[tuple]:
        return iter(self._params.items())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- persistence ----------------------------------------------------

    def save(self, path: Union[str, Path]) -> Path:
        path = save_checkpoint(path, self.parameters())
        logger.info(
            f"Saved {self.network_type} checkpoint",
            extra={"path": str(path), "parameters": self.parameter_count()},
        )
        return path

    def load_state(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        for name, param in self._params.items():
            if name not in arrays:
                if strict:
                    raise CheckpointFormatError(f"checkpoint lacks parameter {name!r}", error_code="MISSING_PARAM")
                continue
            if arrays[name].shape != param.shape:
                raise CheckpointFormatError(
                    f"shape mismatch for {name!r}: {arrays[name].shape} vs {param.shape}",
                    error_code="SHAPE_MISMATCH",
                )
            param.data = np.array(arrays[name], dtype=np.float64)
            param.momentum_buffer = None

    def load(self, path: Union[str, Path], strict: bool = True) -> None:
        self.load_state(load_checkpoint(path), strict=strict)
        logger.info(f"Loaded {self.network_type} checkpoint", extra={"path": str(path)})
