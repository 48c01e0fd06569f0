"""Parameter containers: a minimal Module tree plus the layers the backbone needs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Attribute-order parameter tree.

    Parameters are discovered by walking instance attributes in assignment
    order, recursing into sub-modules and lists of sub-modules, which makes
    ``named_parameters`` a stable declaration order for checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k not in own:
                continue
            if own[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {own[k].shape}")
            own[k].data[...] = v

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


INITS = ("trunc_normal", "fanin")


def init_weight(rng: np.random.Generator, d_in: int, d_out: int, init: str = "trunc_normal") -> np.ndarray:
    """``trunc_normal``: std 0.02.  ``fanin``: std ``1/sqrt(3 d_in)``, the variance of
    the usual uniform(+-1/sqrt(d_in)) layer init."""
    if init == "trunc_normal":
        return trunc_normal(rng, (d_in, d_out))
    if init == "fanin":
        return trunc_normal(rng, (d_in, d_out), std=(3.0 * d_in) ** -0.5)
    raise ValueError(f"unknown init {init!r}; expected one of {INITS}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "trunc_normal"):
        self.weight = parameter(init_weight(rng, d_in, d_out, init))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, init: str = "trunc_normal"):
        self.fc1 = Linear(dim, hidden, rng, init=init)
        self.fc2 = Linear(hidden, dim, rng, init=init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
