"""Parameter initialization and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AutodiffError, Tensor


def xavier_init(rows: int, cols: int, seed) -> Tensor:
    """Uniform Glorot initialization in +-sqrt(6 / (rows + cols)).

    ``seed`` may be an int or a ``numpy.random.SeedSequence``; identical
    seeds reproduce the tensor bit for bit.
    """
    if rows < 1 or cols < 1:
        raise AutodiffError("xavier_init needs positive dimensions")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.values) for k, p in params.items()},
            v={k: np.zeros_like(p.values) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors.

    The model's L2 penalty lives in the loss, so training passes
    ``weight_decay=0``; a nonzero value adds the classic decay term to the
    gradient for callers that want it here instead.
    """
    if lr < 0:
        raise AutodiffError("learning rate must be non-negative")
    if set(params) != set(grads):
        raise AutodiffError("parameter and gradient names differ")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise AutodiffError(f"gradient shape mismatch for {name!r}")
        if weight_decay:
            g = g + weight_decay * p.values
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
