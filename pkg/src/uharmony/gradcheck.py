"""Central finite-difference verification of analytic backward maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, VerificationError
from .tensor import GradTape, Tensor


@dataclass
class InputReport:
    label: str
    n_checked: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    name: str
    tol: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<40s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {status}"


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "op",
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
    labels: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic vector-Jacobian products against central differences.

    ``fn`` maps the input tensors to one output tensor. A fixed random
    cotangent G turns the output into the scalar sum(out * G), whose gradient
    is checked elementwise: (f(x+h) - f(x-h)) / (2h) with relative error
    measured against max(|analytic|, |numeric|, 1e-8). Inputs must be float64;
    ``max_coords`` caps the number of coordinates sampled per input.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            raise ConfigurationError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    with GradTape() as tape:
        out = fn(*inputs)
    cotangent = rng.standard_normal(out.shape)
    tape.backward(out, seed=cotangent)

    def loss_at() -> float:
        return float(np.sum(fn(*inputs).data * cotangent))

    report = GradCheckReport(name=name, tol=tol)
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise VerificationError(f"non-finite analytic gradient in {name} (input {i})")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        aflat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            lp = loss_at()
            flat[c] = orig - step
            lm = loss_at()
            flat[c] = orig
            fd = (lp - lm) / (2 * step)
            worst = max(worst, rel_err(float(aflat[c]), fd))
        label = labels[i] if labels else f"input{i}"
        report.inputs.append(InputReport(label, len(coords), worst))
        t.grad = None
    return report
