"""Parameter initialisation and small dense layers on top of :mod:`nextloc.autodiff`.

Parameters live in flat ``{name: ndarray}`` dicts; forward helpers take the
matching ``{name: Tensor}`` dict so the same code serves inference (constant
tensors) and training (leaf tensors that require grad).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def init_linear(params: dict, prefix: str, rng: np.random.Generator, d_in: int, d_out: int, scale: float = 1.0):
    params[f"{prefix}.w"] = rng.normal(0.0, scale / np.sqrt(d_in), size=(d_in, d_out))
    params[f"{prefix}.b"] = np.zeros(d_out)


def init_mlp(params: dict, prefix: str, rng: np.random.Generator, d_in: int, d_out: int, hidden: int | None = None):
    hidden = hidden or 2 * d_out
    init_linear(params, f"{prefix}.l1", rng, d_in, hidden)
    init_linear(params, f"{prefix}.l2", rng, hidden, d_out)


def linear(P: dict, prefix: str, x: Tensor) -> Tensor:
    return x @ P[f"{prefix}.w"] + P[f"{prefix}.b"]


def mlp(P: dict, prefix: str, x: Tensor) -> Tensor:
    """Two-layer perceptron with a GELU between the layers."""
    return linear(P, f"{prefix}.l2", linear(P, f"{prefix}.l1", x).gelu())


def as_constants(params: dict) -> dict:
    return {name: Tensor(value) for name, value in params.items()}
