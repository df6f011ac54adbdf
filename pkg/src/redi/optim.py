"""AdamW with decoupled weight decay, float32 throughout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor

_f32 = np.float32


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus shared hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, DiffTensor], **hyper) -> "OptimizerState":
        st = cls(**hyper)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.values)
            st.v[name] = np.zeros_like(p.values)
        return st


def decayed_lr(base_lr: float, epoch: int, epochs: int, marks: tuple[float, ...]) -> float:
    """Step schedule: halve the rate at each fractional epoch mark."""
    halvings = sum(1 for m in marks if epoch >= int(m * epochs))
    return base_lr * (0.5 ** halvings)


def adamw_step(
    state: OptimizerState,
    params: dict[str, DiffTensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """One update in place.  Weight decay is decoupled: p *= (1 - lr * wd)
    independently of the adaptive term, so lr=0 leaves parameters unchanged.
    """
    state.step += 1
    t = state.step
    b1, b2 = _f32(state.beta1), _f32(state.beta2)
    c1 = _f32(1.0 - state.beta1 ** t)
    c2 = _f32(1.0 - state.beta2 ** t)
    lr32 = _f32(lr)
    wd = _f32(state.weight_decay)
    eps = _f32(state.eps)
    for name, p in params.items():
        if name not in grads or grads[name] is None:
            raise KeyError(f"missing gradient for parameter '{name}'")
        g = grads[name]
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.values.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (_f32(1.0) - b1) * g
        v *= b2
        v += (_f32(1.0) - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        if wd != 0.0:
            p.values *= _f32(1.0) - lr32 * wd
        p.values -= lr32 * (mhat / (np.sqrt(vhat) + eps))
