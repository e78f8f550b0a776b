"""Parameter containers and the two layer types every block is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


class Module:
    """Anything holding parameters, directly or through child modules.

    Parameter names are the attribute paths, e.g. ``layers.0.attn.w_k.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.value.shape}")
            p.value = value.copy()


def _walk(val, name: str):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense(Module):
    """Affine map plus activation, applied to the last axis (time-distributed).

    Layers followed by GELU get He-normal weights, all others Glorot-uniform.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: str = "linear",
        rng: np.random.Generator | None = None,
        bias: bool = True,
        init: str | None = None,
    ):
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        init = init or ("he" if activation == "gelu" else "glorot")
        if init == "he":
            w = he_normal(rng, n_in, n_out)
        elif init == "glorot":
            w = glorot_uniform(rng, n_in, n_out)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.activation = activation
        self.weight = Parameter(w, decay=True)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def pre_activation(self, x) -> ad.Tensor:
        z = ad.matmul(x, self.weight)
        return z if self.bias is None else ad.add(z, self.bias)

    def __call__(self, x) -> ad.Tensor:
        return ad.activation(self.activation, self.pre_activation(x))


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))

    def __call__(self, x) -> ad.Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)
