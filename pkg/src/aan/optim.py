"""Adam optimizer and the central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained NaN/Inf; training must abort."""


@dataclass
class AdamState:
    """Bias-corrected Adam state, one moment pair per named parameter."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, learning_rate: float, **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to every parameter in `params`.

    Parameters with no accumulated gradient are treated as zero-gradient.
    Raises NonFiniteGradientError naming the first parameter whose gradient
    is not finite.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class GradCheckResult:
    """Outcome of checking analytic gradients against central differences."""

    max_rel_err: float
    per_input: dict
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def worst_input(self) -> str:
        return max(self.per_input, key=self.per_input.get)


def grad_check(f: Callable[[dict], Tensor], inputs: dict,
               h: float = 1e-5, tol: float = 1e-5) -> GradCheckResult:
    """Compare backward-pass gradients of a scalar function with central differences.

    `f` maps a dict of named Tensors to a scalar Tensor and must be pure (no
    visible side effects between calls).  All arithmetic runs in float64.
    The error scale is max(1, |analytic|, |numeric|), so tiny gradients are
    compared absolutely and large ones relatively.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}

    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = f(tensors)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued computation")
    out.backward()
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in tensors.items()
    }

    def evaluate(arrays: dict) -> float:
        return float(f({k: Tensor(v) for k, v in arrays.items()}).data)

    per_input = {}
    for name, arr in base.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            work = {k: (v if k != name else v.copy()) for k, v in base.items()}
            wflat = work[name].reshape(-1)
            wflat[i] = orig + h
            up = evaluate(work)
            wflat[i] = orig - h
            down = evaluate(work)
            nflat[i] = (up - down) / (2.0 * h)
        a = analytic[name]
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        per_input[name] = float((np.abs(a - num) / scale).max()) if arr.size else 0.0

    max_err = max(per_input.values()) if per_input else 0.0
    return GradCheckResult(max_rel_err=max_err, per_input=per_input, tolerance=tol, step=h)
