"""Parameter initialization helpers shared by the encoder and decoder."""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    fan_in defaults to the first dimension, which is the input width for
    the x @ W convention used throughout.
    """
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def ones_init(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def zeros_init(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)
