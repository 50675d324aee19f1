"""Numerical kernel: Gaussian quadrature over normal random effects,
bracketed root-finding, quasi-Newton maximization, and finite-difference
derivatives.

Everything in this module is a pure function of its inputs, so concurrent
use is safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import roots_hermite

__all__ = [
    "QuadratureRule",
    "OptimResult",
    "NonFiniteObjectiveError",
    "gauss_hermite",
    "expect_normal",
    "find_root",
    "maximize",
    "numeric_gradient",
    "numeric_hessian",
]

_EPS = float(np.finfo(float).eps)
# Central differences: h ~ eps^(1/3) balances truncation and rounding error.
_FD_STEP = _EPS ** (1.0 / 3.0)


class NonFiniteObjectiveError(RuntimeError):
    """Objective became non-finite and the line search could not recover.

    Carries ``last_good`` (the best iterate seen) and ``last_value``.
    """

    def __init__(self, message: str, last_good: np.ndarray, last_value: float):
        super().__init__(message)
        self.last_good = last_good
        self.last_value = last_value


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for expectations against the standard normal.

    ``sum(weights * f(nodes))`` approximates ``E[f(Z)]`` for Z ~ N(0,1);
    the weights already absorb the normal density and sum to 1.
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))


@dataclass(frozen=True)
class OptimResult:
    """Outcome of a quasi-Newton maximization."""

    argmax: np.ndarray
    value: float
    gradient_norm: float
    hessian: Optional[np.ndarray]
    converged: bool
    iterations: int

    def hessian_is_negative_definite(self) -> bool:
        """Cholesky check of -H; False when H is unavailable or indefinite."""
        if self.hessian is None:
            return False
        try:
            np.linalg.cholesky(-self.hessian)
            return True
        except np.linalg.LinAlgError:
            return False


def gauss_hermite(order: int) -> QuadratureRule:
    """Gauss-Hermite rule rescaled to integrate against the N(0,1) density.

    Exact for polynomials up to degree ``2 * order - 1``.
    """
    if not 1 <= order <= 200:
        raise ValueError(f"quadrature order must be in [1, 200], got {order}")
    x, w = roots_hermite(order)
    # physicists' weight exp(-t^2): substitute b = sqrt(2) t
    nodes = x * math.sqrt(2.0)
    weights = w / math.sqrt(math.pi)
    return QuadratureRule(nodes=nodes, weights=weights, order=order)


def expect_normal(f: Callable[[np.ndarray], np.ndarray], sigma: float,
                  rule: QuadratureRule) -> float:
    """Approximate ``E[f(b)]`` for b ~ N(0, sigma^2).

    ``f`` may be vectorized over a node array or accept scalars.
    ``sigma == 0`` short-circuits to ``f(0)``.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        val = float(np.asarray(f(np.array(0.0))))
        if not math.isfinite(val):
            raise ValueError("f(0) is not finite")
        return val
    b = sigma * rule.nodes
    vals = np.asarray(f(b), dtype=float)
    if vals.shape != b.shape:
        vals = np.array([float(f(bi)) for bi in b])
    if not np.all(np.isfinite(vals)):
        bad = b[~np.isfinite(vals)]
        raise ValueError(f"f is not finite at quadrature nodes {bad[:3]}...")
    return float(rule.weights @ vals)


def find_root(f: Callable[[float], float], lo: float, hi: float,
              tol: float = 1e-10) -> float:
    """Root of a continuous scalar function on a sign-changing bracket.

    Brent's method (bisection-safeguarded, guaranteed convergent). Returns
    r with |f(r)| <= tol or final bracket width <= tol.
    """
    flo, fhi = float(f(lo)), float(f(hi))
    if not (math.isfinite(flo) and math.isfinite(fhi)):
        raise ValueError(f"bracket endpoints not finite: f({lo})={flo}, f({hi})={fhi}")
    if flo == 0.0:
        return float(lo)
    if fhi == 0.0:
        return float(hi)
    if flo * fhi > 0:
        raise ValueError(
            f"invalid bracket: f({lo})={flo} and f({hi})={fhi} have the same sign"
        )
    xtol = min(tol, 1e-12)
    root = brentq(f, lo, hi, xtol=xtol, rtol=4 * _EPS)
    return float(root)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient with per-coordinate step h*(1+|x_i|)."""
    x = np.asarray(x, dtype=float)
    base = _FD_STEP if h is None else h
    g = np.empty_like(x)
    for i in range(x.size):
        hi = base * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * hi)
    return g


def numeric_hessian(f: Callable[[np.ndarray], float], x: np.ndarray,
                    h: Optional[float] = None) -> np.ndarray:
    """Central-difference Hessian, symmetrized as (H + H^T)/2."""
    x = np.asarray(x, dtype=float)
    base = _FD_STEP if h is None else h
    n = x.size
    steps = base * (1.0 + np.abs(x))
    f0 = float(f(x))
    if not math.isfinite(f0):
        raise ValueError("f not finite at expansion point")
    H = np.empty((n, n))
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation near coordinate {i}")
        H[i, i] = (fp - 2.0 * f0 + fm) / steps[i] ** 2
        for j in range(i + 1, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += [steps[i], steps[j]]
            xpm[i] += steps[i]
            xpm[j] -= steps[j]
            xmp[i] -= steps[i]
            xmp[j] += steps[j]
            xmm[[i, j]] -= [steps[i], steps[j]]
            vals = [float(f(z)) for z in (xpp, xpm, xmp, xmm)]
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"non-finite evaluation near coordinates ({i},{j})")
            H[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * steps[i] * steps[j])
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def _gradient_of(objective, gradient, x):
    if gradient is not None:
        return np.asarray(gradient(x), dtype=float)
    return numeric_gradient(objective, x)


def maximize(objective: Callable[[np.ndarray], float],
             init: Sequence[float],
             tol: float = 1e-6,
             max_iter: int = 500,
             gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             compute_hessian: bool = True,
             max_step: float = 10.0) -> OptimResult:
    """BFGS ascent with backtracking line search.

    Gradients come from ``gradient`` when supplied, otherwise central
    finite differences. The Hessian at the optimum is differenced from the
    gradient. Deterministic given (objective, init, tol). Non-convergence
    is reported via ``converged=False``, never silently.
    """
    x = np.asarray(init, dtype=float).copy()
    fx = float(objective(x))
    if not math.isfinite(fx):
        raise ValueError(f"objective not finite at init: {fx}")
    n = x.size
    g = _gradient_of(objective, gradient, x)
    Hinv = np.eye(n)
    converged = bool(np.linalg.norm(g) <= tol)
    iterations = 0
    reset_used = False

    while not converged and iterations < max_iter:
        iterations += 1
        p = Hinv @ g
        if p @ g <= 0:  # not an ascent direction; reset curvature
            Hinv = np.eye(n)
            p = g.copy()
        pnorm = float(np.linalg.norm(p))
        if pnorm > max_step:
            p *= max_step / pnorm
        # backtracking Armijo line search; non-finite trial values shrink the step
        t = 1.0
        slope = float(g @ p)
        step_ok = False
        saw_nonfinite = False
        for _ in range(60):
            x_new = x + t * p
            f_new = float(objective(x_new))
            if math.isfinite(f_new):
                if f_new >= fx + 1e-4 * t * slope:
                    step_ok = True
                    break
            else:
                saw_nonfinite = True
            t *= 0.5
        if not step_ok:
            if saw_nonfinite and t < 1e-15:
                raise NonFiniteObjectiveError(
                    "objective non-finite along search direction", x.copy(), fx
                )
            if not reset_used:
                Hinv = np.eye(n)
                reset_used = True
                continue
            break  # stalled; fall through with converged status from gradient
        g_new = _gradient_of(objective, gradient, x_new)
        s = x_new - x
        yv = g - g_new  # ascent: curvature pair uses decrease of the gradient
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if iterations == 1:
                Hinv *= sy / float(yv @ yv)
            rho = 1.0 / sy
            I = np.eye(n)
            V = I - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, fx, g = x_new, f_new, g_new
        converged = bool(np.linalg.norm(g) <= tol)

    hess = None
    if compute_hessian:
        if gradient is not None:
            hess = _hessian_from_gradient(gradient, x)
        else:
            hess = numeric_hessian(objective, x)
    return OptimResult(
        argmax=x,
        value=fx,
        gradient_norm=float(np.linalg.norm(g)),
        hessian=hess,
        converged=converged,
        iterations=iterations,
    )


def _hessian_from_gradient(gradient, x, h: Optional[float] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    base = _FD_STEP if h is None else h
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        hi = base * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        H[:, i] = (np.asarray(gradient(xp)) - np.asarray(gradient(xm))) / (2.0 * hi)
    return 0.5 * (H + H.T)
