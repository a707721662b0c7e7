"""Limited-memory BFGS with strong-Wolfe line search.

The two-loop recursion, history management, convergence tests and the
failure contract live here; the Wolfe step itself is scipy's line search,
wrapped so an objective returning (value, gradient) in one call is never
evaluated twice at the same point. Line-search failure is not an exception:
the optimizer returns the best iterate found with a diagnostic flag, which
is what a training loop wants near a flat optimum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search as _scipy_line_search

from .errors import NumericError, ParameterError


@dataclass
class IterationRecord:
    iteration: int
    value: float
    grad_norm: float
    step: float


@dataclass
class MinimizeResult:
    params: np.ndarray
    value: float
    grad: np.ndarray
    trace: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False
    message: str = ""
    n_evaluations: int = 0


class _CachedObjective:
    """Serve f(x) and grad(x) from single (value, gradient) evaluations."""

    def __init__(self, objective):
        self._objective = objective
        self._cache: dict[bytes, tuple[float, np.ndarray]] = {}
        self.n_evaluations = 0

    def evaluate(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            value, grad = self._objective(x)
            value = float(value)
            grad = np.asarray(grad, dtype=np.float64)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise NumericError("objective returned non-finite value or gradient")
            self.n_evaluations += 1
            if len(self._cache) > 64:
                self._cache.clear()
            hit = (value, grad)
            self._cache[key] = hit
        return hit

    def value(self, x: np.ndarray) -> float:
        return self.evaluate(x)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[1]


def _armijo_backtrack(cached, x, f, g, direction, c1, max_halvings=60):
    """Halve the step until sufficient decrease holds; None when exhausted.

    Fallback for rays where the Wolfe search cannot bracket a point: a sharp
    valley very close to the origin needs far more shrinkage than a bracketing
    search performs. Sufficient decrease alone is enough to keep the outer
    loop monotone (the curvature filter on the history still applies).
    """
    derphi0 = float(np.dot(g, direction))
    alpha = 1.0
    for _ in range(max_halvings):
        f_new = cached.value(x + alpha * direction)
        if f_new <= f + c1 * alpha * derphi0:
            return alpha
        alpha *= 0.5
    return None


def _two_loop_direction(grad: np.ndarray, s_list, y_list, rho_list) -> np.ndarray:
    """Apply the inverse-Hessian approximation to -grad."""
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(
    objective,
    init: np.ndarray,
    memory: int = 10,
    max_iters: int = 100,
    c1: float = 1e-4,
    c2: float = 0.9,
    gtol: float = 1e-8,
    ftol: float = 1e-11,
    callback=None,
) -> MinimizeResult:
    """Minimize objective(x) -> (value, gradient) from `init`.

    Terminates when the gradient infinity norm drops below gtol, the
    relative value change drops below ftol, or max_iters is reached. The
    trace records (value, gradient norm, accepted step) per iteration,
    starting with the initial point at iteration 0.
    """
    if not 0 < c1 < c2 < 1:
        raise ParameterError(f"need 0 < c1 < c2 < 1, got c1={c1}, c2={c2}")
    if memory < 1:
        raise ParameterError(f"memory must be >= 1, got {memory}")
    cached = _CachedObjective(objective)
    x = np.asarray(init, dtype=np.float64).copy()
    f, g = cached.evaluate(x)
    trace = [IterationRecord(0, f, float(np.max(np.abs(g))), 0.0)]
    result = MinimizeResult(params=x, value=f, grad=g, trace=trace)

    if np.max(np.abs(g)) < gtol:
        result.converged = True
        result.message = "gradient tolerance satisfied at the initial point"
        result.n_evaluations = cached.n_evaluations
        return result

    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    # standard warm-start trick so the very first Wolfe trial is ~1/|g|
    old_f = f + np.linalg.norm(g) / 2.0

    for it in range(1, max_iters + 1):
        direction = _two_loop_direction(g, s_list, y_list, rho_list)
        if np.dot(direction, g) >= 0:
            # history produced a non-descent direction; restart steepest
            s_list.clear()
            y_list.clear()
            rho_list.clear()
            direction = -g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, _, _, f_new, _, _ = _scipy_line_search(
                cached.value,
                cached.grad,
                x,
                direction,
                gfk=g,
                old_fval=f,
                old_old_fval=old_f,
                c1=c1,
                c2=c2,
                maxiter=30,
            )
        if alpha is None:
            alpha = _armijo_backtrack(cached, x, f, g, direction, c1)
        if alpha is None:
            result.line_search_failed = True
            result.message = f"line search failed at iteration {it}; returning best iterate"
            break
        x_new = x + alpha * direction
        f_new, g_new = cached.evaluate(x_new)
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        old_f, x, g = f, x_new, g_new
        f_prev, f = f, f_new
        grad_norm = float(np.max(np.abs(g)))
        trace.append(IterationRecord(it, f, grad_norm, float(alpha)))
        result.params, result.value, result.grad = x, f, g
        if callback is not None:
            callback(trace[-1])
        if grad_norm < gtol:
            result.converged = True
            result.message = f"gradient tolerance reached at iteration {it}"
            break
        if abs(f_prev - f) < ftol * max(abs(f_prev), abs(f), 1.0):
            result.converged = True
            result.message = f"value change below tolerance at iteration {it}"
            break
    else:
        result.message = f"stopped after max_iters={max_iters}"

    result.n_evaluations = cached.n_evaluations
    return result
