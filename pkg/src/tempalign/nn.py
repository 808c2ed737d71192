"""Parameter containers and the few layer types the models are built from."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Module", "Conv2d", "Linear", "ResidualBlock", "param"]


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    return param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), dtype)


class Module:
    """Attribute-walking parameter registry.

    Trainable tensors and sub-modules stored as attributes (or in lists of
    sub-modules) are discovered by :meth:`parameters`, which names each
    tensor by its dotted attribute path.
    """

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                if val.name is None:
                    val.name = path
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{path}.{i}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, rng=None, dtype=np.float32, init="he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2
        shape = (cout, cin, k, k)
        if init == "zero":
            self.weight = param(np.zeros(shape), dtype)
        else:
            self.weight = he_normal(rng, shape, cin * k * k, dtype)
        self.bias = param(np.zeros(cout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored ``[fan_in, fan_out]``."""

    def __init__(self, fin, fout, rng=None, dtype=np.float32, init="he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zero":
            self.weight = param(np.zeros((fin, fout)), dtype)
        else:
            self.weight = he_normal(rng, (fin, fout), fin, dtype)
        self.bias = param(np.zeros(fout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.bias_add(T.matmul(x, self.weight), self.bias)


class ResidualBlock(Module):
    """``relu(x + conv(relu(conv(x))))`` at constant width."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        # damp the residual branch so stacked blocks start near identity
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x + self.conv2(T.relu(self.conv1(x))))
