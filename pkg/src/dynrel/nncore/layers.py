"""Parameterised building blocks on top of the tensor core."""

import numpy as np

from . import tensor as T
from ..errors import ConfigurationError


class Module:
    """Base class: anything whose attributes are Tensors or Modules.

    ``named_parameters`` walks attributes recursively and yields
    dotted names in a stable (insertion) order, so a whole model can
    be flattened for the optimizer or a checkpoint.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, T.Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full}.{i}.")
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigurationError(
                f"parameter set mismatch: missing={missing}, unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name}: have {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    draw = rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())
    return T.Tensor(draw, requires_grad=True)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        self.weight = _uniform_init(rng, (in_features, out_features), in_features)
        self.bias = _uniform_init(rng, (out_features,), in_features) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 stride=1, padding=0, bias=True):
        fan_in = in_channels * kernel_size
        self.weight = _uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in)
        self.bias = _uniform_init(rng, (out_channels,), fan_in) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv1d(x, self.weight, bias=self.bias,
                        stride=self.stride, padding=self.padding)


class MLP(Module):
    """Stack of Linear layers with ELU between them, linear at the top."""

    def __init__(self, sizes, rng):
        if len(sizes) < 2:
            raise ConfigurationError(f"MLP needs at least [in, out] sizes, got {sizes}")
        self.layers = [Linear(sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = T.elu(layer(x))
        return self.layers[-1](x)


class GRUCell(Module):
    """Single-step gated recurrent unit.

    Gate convention: update gate u mixes the previous state with the
    candidate as h' = u * h_prev + (1 - u) * n, so an all-zero
    parameter set halves the state each step (u = sigmoid(0) = 0.5).
    """

    def __init__(self, input_size, hidden_size, rng):
        self.w_ir = Linear(input_size, hidden_size, rng)
        self.w_hr = Linear(hidden_size, hidden_size, rng, bias=False)
        self.w_iu = Linear(input_size, hidden_size, rng)
        self.w_hu = Linear(hidden_size, hidden_size, rng, bias=False)
        self.w_in = Linear(input_size, hidden_size, rng)
        self.w_hn = Linear(hidden_size, hidden_size, rng, bias=False)

    def __call__(self, x, h):
        r = T.sigmoid(T.add(self.w_ir(x), self.w_hr(h)))
        u = T.sigmoid(T.add(self.w_iu(x), self.w_hu(h)))
        n = T.tanh(T.add(self.w_in(x), T.mul(r, self.w_hn(h))))
        return u * h + (1.0 - u) * n
