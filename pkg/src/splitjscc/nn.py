"""Parameterized layers built on :mod:`splitjscc.functional`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor, init


class Module:
    """Container that tracks parameters, buffers and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params, modules = self.__dict__.get("_params"), self.__dict__.get("_modules")
        if params is None:
            raise RuntimeError("Module.__init__ was not called")
        params.pop(name, None)
        modules.pop(name, None)
        if isinstance(value, Tensor) and value.requires_grad:
            params[name] = value
        elif isinstance(value, Module):
            modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, np.asarray(value, dtype=DTYPE))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import DimensionError

        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != np.shape(value):
                raise DimensionError(f"{name}: expected shape {target.shape}, got {np.shape(value)}")
            target[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        object.__setattr__(self, "layers", [])
        for layer in layers:
            self.append(layer)

    def append(self, layer: Module) -> None:
        self._modules[str(len(self.layers))] = layer
        self.layers.append(layer)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Sequential(*self.layers[idx])
        return self.layers[idx]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    """3x3 (by default) convolution; weights are kaiming-normal, bias zero.

    With ``rng=None`` the weights are left at zero, which is enough for shape
    and FLOP bookkeeping without drawing random numbers.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 1, rng=None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        shape = (out_ch, in_ch, kernel, kernel)
        self.weight = init(shape, "kaiming_normal", rng) if rng is not None else init(shape, "constant")
        self.bias = init((out_ch,), "constant")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        _, h, w = shape
        kh, kw = self.kernel_size
        return (
            self.out_channels,
            F.conv_output_size(h, kh, self.stride, self.padding),
            F.conv_output_size(w, kw, self.stride, self.padding),
        )

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, stride={self.stride})"


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = init((channels,), "constant", value=1.0)
        self.bias = init((channels,), "constant", value=0.0)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class ReLU(Module):
    def forward(self, x):
        return x.relu()

    def __repr__(self):
        return "ReLU()"


class PReLU(Module):
    def __init__(self, channels: int, init_slope: float = 0.25):
        super().__init__()
        self.weight = init((channels,), "constant", value=init_slope)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.prelu(x, self.weight)

    def __repr__(self):
        return f"PReLU({self.channels})"


class MaxPool2d(Module):
    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def forward(self, x):
        return F.maxpool2d(x, self.window, self.window)

    def __repr__(self):
        return "MaxPool2d(2)"


class Upsample2x(Module):
    def forward(self, x):
        return F.upsample_nearest2x(x)

    def __repr__(self):
        return "Upsample2x()"


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)

    def __repr__(self):
        return "Flatten()"


class Linear(Module):
    """Affine map; kaiming-normal weights unless ``std`` is given."""

    def __init__(self, din: int, dout: int, rng=None, std: float | None = None):
        super().__init__()
        shape = (dout, din)
        if rng is None:
            self.weight = init(shape, "constant")
        elif std is None:
            self.weight = init(shape, "kaiming_normal", rng)
        else:
            self.weight = init(shape, "normal", rng, std=std)
        self.bias = init((dout,), "constant")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class GDN(Module):
    """Generalized divisive normalization (or its inverse with ``inverse=True``).

    Trainable surrogates are reparameterized at forward time:
    beta = max(beta_raw, floor)**2 and gamma = gamma_raw**2, so beta stays
    strictly positive and gamma non-negative under unconstrained SGD.
    """

    beta_floor = 1e-6

    def __init__(self, channels: int, inverse: bool = False, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_raw = init((channels,), "constant", value=1.0)
        self.gamma_raw = Tensor(math.sqrt(gamma_init) * np.eye(channels), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.beta_raw.shape[0]

    def effective_params(self) -> tuple[Tensor, Tensor]:
        return self.beta_raw.clamp_min(self.beta_floor) ** 2, self.gamma_raw**2

    def forward(self, x):
        beta, gamma = self.effective_params()
        return F.igdn(x, beta, gamma) if self.inverse else F.gdn(x, beta, gamma)

    def __repr__(self):
        return f"{'IGDN' if self.inverse else 'GDN'}({self.channels})"
