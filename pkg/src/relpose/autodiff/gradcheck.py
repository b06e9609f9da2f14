"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relpose.autodiff.tensor import Tensor, trace_branches


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose perturbation crossed a kink

    def __bool__(self):
        return self.checked > 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude.

    The scale never drops below ``floor``: a gradient that is exactly zero
    (e.g. a softmax shift direction) is then compared in absolute terms
    instead of dividing rounding noise by rounding noise.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn, inputs: list[Tensor], h: float = 1e-3, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare the backward pass of ``fn(*inputs)`` (a scalar Tensor) against
    central differences ``(f(x+h) - f(x-h)) / 2h`` on every input coordinate.

    A coordinate is skipped when either perturbed evaluation takes a
    different discrete branch (relu mask, argmax, sign) than the base
    point; there the function is not differentiable on the interval and the
    difference quotient is not an oracle for the derivative.

    ``max_coords`` limits the number of coordinates checked per input
    (sampled with ``rng``) to bound runtime on large parameter sets.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with trace_branches() as base_branches:
        out = fn(*inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst, checked, skipped = 0.0, 0, 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_sel, n_sel = [], []
        for k in coords:
            orig = flat[k]
            values = []
            same = True
            for sign in (1.0, -1.0):
                flat[k] = orig + sign * h
                with trace_branches() as br:
                    values.append(float(fn(*inputs).data))
                same = same and br == base_branches
            flat[k] = orig
            if not same:
                skipped += 1
                continue
            a_sel.append(a.reshape(-1)[k])
            n_sel.append((values[0] - values[1]) / (2 * h))
        if a_sel:
            checked += len(a_sel)
            worst = max(worst, relative_error(np.array(a_sel), np.array(n_sel)))
    return GradCheckResult(worst, checked, skipped)
