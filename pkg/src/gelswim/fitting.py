"""Small bounded Levenberg-Marquardt solver shared by the material and helix fits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    converged: bool
    n_iter: int
    message: str


def numeric_jacobian(fun: Callable, x: np.ndarray, r0: Optional[np.ndarray] = None,
                     lower=None, upper=None, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, falling back to one-sided steps at bounds."""
    x = np.asarray(x, dtype=float)
    if r0 is None:
        r0 = np.asarray(fun(x), dtype=float)
    jac = np.empty((r0.size, x.size))
    for k in range(x.size):
        h = rel_step * max(abs(x[k]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        hi_ok = upper is None or xp[k] <= upper[k]
        lo_ok = lower is None or xm[k] >= lower[k]
        if hi_ok and lo_ok:
            jac[:, k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h)
        elif hi_ok:
            jac[:, k] = (np.asarray(fun(xp)) - r0) / h
        else:
            jac[:, k] = (r0 - np.asarray(fun(xm))) / h
    return jac


def levmar(fun: Callable[[np.ndarray], np.ndarray], x0, lower=None, upper=None,
           jac: Optional[Callable] = None, max_iter: int = 200, xtol: float = 1e-12,
           gtol: float = 1e-14, ftol: float = 1e-15, damping0: float = 1e-3) -> LMResult:
    """Minimise ``0.5*|fun(x)|^2`` with a projected, Marquardt-scaled LM iteration.

    Steps leaving the box ``[lower, upper]`` are clipped to it, and variables held
    at a bound by the gradient drop out of the step system. A step is accepted
    when the actual cost reduction is positive; the damping follows the Nielsen
    update rule.
    """
    x = np.asarray(x0, dtype=float).copy()
    lower = None if lower is None else np.asarray(lower, dtype=float)
    upper = None if upper is None else np.asarray(upper, dtype=float)

    def clip(v):
        if lower is not None:
            v = np.maximum(v, lower)
        if upper is not None:
            v = np.minimum(v, upper)
        return v

    x = clip(x)
    r = np.asarray(fun(x), dtype=float)
    cost = 0.5 * float(r @ r)
    J = jac(x) if jac is not None else numeric_jacobian(fun, x, r, lower, upper)
    A = J.T @ J
    g = J.T @ r
    mu = damping0 * max(float(np.max(np.diag(A))), 1e-300)
    nu = 2.0
    for it in range(1, max_iter + 1):
        # variables pinned at a bound with the gradient pushing outward are frozen
        free = np.ones(x.size, dtype=bool)
        if lower is not None:
            free &= ~((x <= lower) & (g > 0))
        if upper is not None:
            free &= ~((x >= upper) & (g < 0))
        gf = g[free]
        if gf.size == 0 or np.max(np.abs(gf)) <= gtol * max(1.0, cost) or cost == 0.0:
            return LMResult(x, cost, True, it - 1, "gradient tolerance reached")
        Af = A[np.ix_(free, free)]
        scale = np.maximum(np.diag(Af), 1e-30)
        step = np.zeros_like(x)
        try:
            step[free] = np.linalg.solve(Af + mu * np.diag(scale), -gf)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2
            continue
        x_new = clip(x + step)
        step = x_new - x
        if np.linalg.norm(step) <= xtol * (np.linalg.norm(x) + xtol):
            return LMResult(x, cost, True, it, "step tolerance reached")
        r_new = np.asarray(fun(x_new), dtype=float)
        cost_new = 0.5 * float(r_new @ r_new)
        predicted = -(g @ step) - 0.5 * step @ (A @ step)
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if np.isfinite(cost_new) and cost_new < cost:
            converged_f = (cost - cost_new) <= ftol * cost
            x, r, cost = x_new, r_new, cost_new
            J = jac(x) if jac is not None else numeric_jacobian(fun, x, r, lower, upper)
            A = J.T @ J
            g = J.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3) if rho > 0 else 1.0
            nu = 2.0
            if converged_f:
                return LMResult(x, cost, True, it, "cost reduction below ftol")
        else:
            mu *= nu
            nu *= 2.0
            if nu > 1e30:
                return LMResult(x, cost, True, it, "no further decrease possible")
    return LMResult(x, cost, False, max_iter, "iteration cap reached")
