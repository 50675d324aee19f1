"""Weighted logistic and Poisson regression by iteratively reweighted
least squares, with model-based and cluster-robust covariance.

These fits back the naive marginal estimators, the conditional exposure
model, and the cross-solver oracles used in tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.special import expit, xlogy

__all__ = [
    "GlmFit",
    "SeparationError",
    "RankDeficiencyError",
    "fit_logistic",
    "fit_poisson",
    "sandwich_cov",
]

SEPARATION_COEF_BOUND = 50.0
_SCORE_TOL = 1e-10
_REL_DEV_TOL = 1e-10
_MAX_ITER = 100


class SeparationError(RuntimeError):
    """Coefficients diverged (|coef| > 50): the MLE lies at infinity."""


class RankDeficiencyError(ValueError):
    """Design is rank deficient on the weighted support."""

    def __init__(self, columns: Sequence[int]):
        self.columns = tuple(columns)
        super().__init__(f"design rank deficient; collinear columns {self.columns}")


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    model_cov: np.ndarray
    robust_cov: Optional[np.ndarray]
    deviance: float
    iterations: int
    converged: bool
    family: str = "logistic"
    offset: Optional[np.ndarray] = None


def _check_rank(X: np.ndarray, weights: np.ndarray):
    support = weights > 0
    Xs = X[support]
    if Xs.shape[0] < X.shape[1]:
        raise RankDeficiencyError(range(X.shape[1]))
    _, R, piv = qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(Xs.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        raise RankDeficiencyError(sorted(piv[rank:]))


def _mu_var_dev(X, beta, offset, y, weights, family):
    eta = X @ beta + offset
    if family == "logistic":
        mu = expit(eta)
        var = mu * (1.0 - mu)
        dev = -2.0 * float(np.sum(weights * (xlogy(y, mu) + xlogy(1 - y, 1 - mu))))
    else:
        mu = np.exp(np.clip(eta, -700.0, 700.0))
        var = mu
        dev = 2.0 * float(
            np.sum(weights * (xlogy(y, y / np.where(mu > 0, mu, 1.0)) - (y - mu)))
        )
    return eta, mu, var, dev


def _irls(X, y, weights, offset, family):
    n, p = X.shape
    y = np.asarray(y, dtype=float)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    offset_arr = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    _check_rank(X, weights)

    beta = np.zeros(p)
    dev_prev = None
    converged = False
    it = 0
    for it in range(1, _MAX_ITER + 1):
        eta, mu, var, dev = _mu_var_dev(X, beta, offset_arr, y, weights, family)
        score = X.T @ (weights * (y - mu))
        small_score = np.linalg.norm(score) <= _SCORE_TOL
        dev_stalled = dev_prev is not None and (
            abs(dev - dev_prev) < _REL_DEV_TOL * max(abs(dev_prev), 1e-300)
        )
        # both must hold: a stalled deviance alone can hide a sloppy root,
        # a tiny score alone can hide a fit drifting to infinity
        if small_score and (dev_stalled or it == 1):
            converged = True
            break
        dev_prev = dev
        w_irls = weights * var
        wz = w_irls * (eta - offset_arr) + weights * (y - mu)
        XtWX = X.T @ (w_irls[:, None] * X)
        try:
            beta_new = np.linalg.solve(XtWX, X.T @ wz)
        except np.linalg.LinAlgError:
            raise SeparationError(
                f"singular weighted information after {it} iterations "
                "(fitted values saturated)"
            )
        if np.max(np.abs(beta_new)) > SEPARATION_COEF_BOUND:
            raise SeparationError(
                f"coefficients diverged beyond {SEPARATION_COEF_BOUND} "
                f"(max |coef| = {np.max(np.abs(beta_new)):.1f}); "
                "data are (quasi-)separated"
            )
        beta = beta_new

    eta, mu, var, dev = _mu_var_dev(X, beta, offset_arr, y, weights, family)
    XtWX = X.T @ ((weights * var)[:, None] * X)
    return beta, mu, dev, it, converged, XtWX


def _cluster_robust(X, y, mu, weights, XtWX, cluster_ids):
    ids = np.asarray(cluster_ids)
    scores = X * (weights * (y - mu))[:, None]
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    cluster_scores = np.add.reduceat(scores[order], boundaries, axis=0)
    meat = cluster_scores.T @ cluster_scores
    bread_inv = np.linalg.inv(XtWX)
    return bread_inv @ meat @ bread_inv


def fit_logistic(design: np.ndarray, y: np.ndarray,
                 weights: Optional[np.ndarray] = None,
                 cluster_ids: Optional[np.ndarray] = None,
                 offset: Optional[np.ndarray] = None) -> GlmFit:
    """Weighted logistic regression via IRLS.

    Solves the weighted score equations sum_i w_i x_i (y_i - mu_i) = 0 to
    a score norm of 1e-10. Raises :class:`SeparationError` when
    coefficients diverge and :class:`RankDeficiencyError` (naming the
    collinear columns) when the design is rank deficient on the weighted
    support. ``robust_cov`` is the cluster sandwich when ``cluster_ids``
    is supplied.
    """
    X = np.asarray(design, dtype=float)
    beta, mu, dev, it, converged, XtWX = _irls(X, y, weights, offset, "logistic")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    model_cov = np.linalg.inv(XtWX)
    robust = None
    if cluster_ids is not None:
        robust = _cluster_robust(X, np.asarray(y, float), mu, w, XtWX, cluster_ids)
    return GlmFit(coef=beta, model_cov=model_cov, robust_cov=robust,
                  deviance=dev, iterations=it, converged=converged,
                  family="logistic", offset=offset)


def fit_poisson(design: np.ndarray, y: np.ndarray,
                weights: Optional[np.ndarray] = None,
                offset: Optional[np.ndarray] = None,
                cluster_ids: Optional[np.ndarray] = None) -> GlmFit:
    """Weighted Poisson (log link) regression via IRLS."""
    X = np.asarray(design, dtype=float)
    beta, mu, dev, it, converged, XtWX = _irls(X, y, weights, offset, "poisson")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    model_cov = np.linalg.inv(XtWX)
    robust = None
    if cluster_ids is not None:
        robust = _cluster_robust(X, np.asarray(y, float), mu, w, XtWX, cluster_ids)
    return GlmFit(coef=beta, model_cov=model_cov, robust_cov=robust,
                  deviance=dev, iterations=it, converged=converged,
                  family="poisson", offset=offset)


def sandwich_cov(fit: GlmFit, design: np.ndarray, y: np.ndarray,
                 weights: Optional[np.ndarray] = None,
                 cluster_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Cluster-robust covariance bread^-1 meat bread^-1 at a converged fit.

    meat sums outer products of within-cluster score sums; with
    ``cluster_ids=None`` every row is its own cluster (heteroskedasticity-
    robust).
    """
    if not fit.converged:
        raise ValueError("sandwich_cov requires a converged fit")
    X = np.asarray(design, dtype=float)
    yv = np.asarray(y, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    offset_arr = np.zeros(X.shape[0]) if fit.offset is None else np.asarray(fit.offset, float)
    _, mu, var, _ = _mu_var_dev(X, fit.coef, offset_arr, yv, w, fit.family)
    XtWX = X.T @ ((w * var)[:, None] * X)
    if np.linalg.matrix_rank(XtWX) < XtWX.shape[0]:
        raise np.linalg.LinAlgError("singular bread matrix")
    ids = np.arange(X.shape[0]) if cluster_ids is None else cluster_ids
    return _cluster_robust(X, yv, mu, w, XtWX, ids)
