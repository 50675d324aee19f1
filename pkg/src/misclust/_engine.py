"""Vectorized likelihood core shared by the joint-model and
observed-likelihood fitters.

Computes per-cluster integrated log-likelihoods for the shared-random-
intercept model of cluster size and outcomes, under a fixed exposure
value per cluster ("branch"), together with analytic per-cluster
gradients. Everything here works on flat arrays; the public modules own
the dataset-facing contracts.

Reduction order is fixed (by cluster index) so objective values are
bit-reproducible for the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, gammaln

from .data import Dataset
from .numerics import QuadratureRule

CONVENTIONS = ("conditional-intercept", "marginalized-size")

_SIGMA_FLOOR = 1e-12
_TAIL_LP = 33.0  # beyond this the marginal mean underflows; closed form applies


@dataclass(frozen=True)
class ArrayData:
    """Flat-array view of a Dataset (units contiguous by cluster)."""

    y: np.ndarray            # (U,) float
    X2: np.ndarray           # (U, p2)
    unit_cluster: np.ndarray  # (U,) int
    offsets: np.ndarray      # (K,) first unit index of each cluster
    sizes: np.ndarray        # (K,) int
    counts: np.ndarray       # (K,) float, n_k - 1
    lgamma_counts: np.ndarray  # (K,) lgamma(n_k)
    Z2: np.ndarray           # (K, q)
    w1: np.ndarray           # (K,) int
    r: np.ndarray            # (K,) int
    x1: np.ndarray           # (K,) int, -1 when unobserved
    sum_y: np.ndarray        # (K,) per-cluster outcome totals

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ArrayData":
        K = dataset.n_clusters
        sizes = np.array([c.n for c in dataset.clusters], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        U = int(sizes.sum())
        p2 = len(dataset.x2_names)
        q = len(dataset.z2_names)
        y = np.empty(U)
        X2 = np.empty((U, p2))
        unit_cluster = np.repeat(np.arange(K), sizes)
        Z2 = np.empty((K, q))
        w1 = np.empty(K, dtype=np.int64)
        r = np.empty(K, dtype=np.int64)
        x1 = np.empty(K, dtype=np.int64)
        pos = 0
        for k, c in enumerate(dataset.clusters):
            Z2[k] = c.z2
            w1[k] = c.w1
            r[k] = c.r
            x1[k] = -1 if c.x1_true is None else c.x1_true
            for u in c.units:
                y[pos] = u.y
                X2[pos] = u.x2
                pos += 1
        counts = (sizes - 1).astype(float)
        sum_y = np.add.reduceat(y, offsets) if U else np.zeros(K)
        return cls(y=y, X2=X2, unit_cluster=unit_cluster, offsets=offsets,
                   sizes=sizes, counts=counts, lgamma_counts=gammaln(counts + 1.0),
                   Z2=Z2, w1=w1, r=r, x1=x1, sum_y=sum_y)


@dataclass(frozen=True)
class Workspace:
    """A cluster subset of an ArrayData with re-based unit arrays."""

    cl_idx: np.ndarray
    y: np.ndarray
    X2: np.ndarray
    offsets: np.ndarray
    unit_cl_local: np.ndarray
    counts: np.ndarray
    lgamma_counts: np.ndarray
    Z2: np.ndarray
    sum_y: np.ndarray
    n_units_per_cluster: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.cl_idx.size

    @classmethod
    def build(cls, ad: ArrayData, cl_idx: np.ndarray) -> "Workspace":
        cl_idx = np.asarray(cl_idx, dtype=np.int64)
        sizes = ad.sizes[cl_idx]
        unit_idx = np.concatenate(
            [np.arange(ad.offsets[k], ad.offsets[k] + ad.sizes[k]) for k in cl_idx]
        ) if cl_idx.size else np.empty(0, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        return cls(
            cl_idx=cl_idx,
            y=ad.y[unit_idx],
            X2=ad.X2[unit_idx],
            offsets=offsets,
            unit_cl_local=np.repeat(np.arange(cl_idx.size), sizes),
            counts=ad.counts[cl_idx],
            lgamma_counts=ad.lgamma_counts[cl_idx],
            Z2=ad.Z2[cl_idx],
            sum_y=ad.sum_y[cl_idx],
            n_units_per_cluster=sizes,
        )


def _logsumexp_rows(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row log-sum-exp and the corresponding softmax weights."""
    M = A.max(axis=1)
    finite = np.isfinite(M)
    shifted = np.where(finite[:, None], A - np.where(finite, M, 0.0)[:, None], -np.inf)
    expo = np.exp(shifted)
    S = expo.sum(axis=1)
    out = np.where(finite, M + np.log(S), -np.inf)
    pi = np.where(finite[:, None], expo / np.where(S > 0, S, 1.0)[:, None], 0.0)
    return out, pi


def solve_delta_many(lp: np.ndarray, sigma: float, rule: QuadratureRule
                     ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve sum_j w_j expit(d + sigma t_j) = expit(lp) for d, elementwise.

    Returns (delta, D, C) with D = sum_j w_j p_j(1-p_j) and
    C = sum_j w_j p_j(1-p_j) t_j at the solution (the implicit-function
    factors for the beta and sigma chain rules).

    Duplicate linear predictors (rounded at 1e-12) are solved once and
    scattered back, which is what makes repeated categorical predictors
    cheap.
    """
    lp = np.asarray(lp, dtype=float)
    t = rule.nodes
    w = rule.weights
    if sigma < _SIGMA_FLOOR:
        v = expit(lp) * (1.0 - expit(lp))
        return lp.copy(), v, np.zeros_like(lp)

    keys = np.round(lp, 12)
    uniq, inv = np.unique(keys, return_inverse=True)

    st = sigma * t
    # log E[e^{sigma t}] under the rule; exact tail offset of the solve
    a = np.log(w) + st
    amax = a.max()
    c0 = amax + np.log(np.exp(a - amax).sum())

    d = uniq.copy()
    lo = uniq - c0 - 0.5
    hi = uniq + c0 + 0.5
    target = expit(uniq)
    mid = np.abs(uniq) <= _TAIL_LP
    d[~mid] = np.where(uniq[~mid] < 0, uniq[~mid] - c0, uniq[~mid] + c0)

    if np.any(mid):
        dm = d[mid]
        lom, him = lo[mid], hi[mid]
        tm = target[mid]
        for _ in range(80):
            P = expit(dm[:, None] + st[None, :])
            m = P @ w
            resid = m - tm
            lom = np.where(resid < 0, np.maximum(lom, dm), lom)
            him = np.where(resid > 0, np.minimum(him, dm), him)
            mp = (P * (1.0 - P)) @ w
            step = resid / np.maximum(mp, 1e-300)
            d_new = dm - step
            outside = (d_new <= lom) | (d_new >= him)
            d_new = np.where(outside, 0.5 * (lom + him), d_new)
            if np.max(np.abs(d_new - dm)) <= 1e-13:
                dm = d_new
                break
            dm = d_new
        d[mid] = dm

    P = expit(d[:, None] + st[None, :])
    pq = P * (1.0 - P)
    D = pq @ w
    C = pq @ (w * t)
    return d[inv], D[inv], C[inv]


@dataclass(frozen=True)
class ParamLayout:
    """Column layout of the joint-model block of the parameter vector."""

    n_alpha: int
    n_beta: int
    include_size: bool

    @property
    def dim(self) -> int:
        if self.include_size:
            return self.n_alpha + self.n_beta + 4  # + s0, s1, g0, g1
        return self.n_beta + 2  # + s0, s1

    @property
    def sl_alpha(self) -> slice:
        return slice(0, self.n_alpha if self.include_size else 0)

    @property
    def sl_beta(self) -> slice:
        start = self.n_alpha if self.include_size else 0
        return slice(start, start + self.n_beta)

    def idx_s(self, arm: int) -> int:
        return self.sl_beta.stop + arm

    def idx_g(self, arm: int) -> int:
        return self.sl_beta.stop + 2 + arm


@dataclass(frozen=True)
class JmmTheta:
    alpha: np.ndarray
    beta: np.ndarray
    s0: float
    s1: float
    g0: float
    g1: float

    @classmethod
    def unpack(cls, theta: np.ndarray, layout: ParamLayout) -> "JmmTheta":
        theta = np.asarray(theta, dtype=float)
        if layout.include_size:
            na = layout.n_alpha
            nb = layout.n_beta
            return cls(alpha=theta[:na], beta=theta[na:na + nb],
                       s0=float(theta[na + nb]), s1=float(theta[na + nb + 1]),
                       g0=float(theta[na + nb + 2]), g1=float(theta[na + nb + 3]))
        nb = layout.n_beta
        return cls(alpha=np.empty(0), beta=theta[:nb],
                   s0=float(theta[nb]), s1=float(theta[nb + 1]), g0=0.0, g1=0.0)


def branch_loglik(ws: Workspace, x_val: int, th: JmmTheta, layout: ParamLayout,
                  rule: QuadratureRule, *, marginalized: bool = True,
                  convention: str = "conditional-intercept",
                  want_grad: bool = True
                  ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Per-cluster integrated log-likelihood with exposure fixed at x_val.

    Returns (L, G): L is (Kc,) log-likelihood values; G is
    (Kc, layout.dim) per-cluster gradients (None when want_grad=False).
    Gradient columns for the off-arm scale/loading are zero.
    """
    Kc = ws.n_clusters
    if Kc == 0:
        return np.empty(0), (np.empty((0, layout.dim)) if want_grad else None)
    arm = int(x_val)
    sigma = float(np.exp(th.s1 if arm else th.s0))
    gamma = th.g1 if arm else th.g0
    t = rule.nodes
    w = rule.weights
    logw = np.log(w)
    J = t.size

    beta = th.beta
    lp = beta[0] + beta[1] * x_val + (ws.X2 @ beta[2:] if beta.size > 2 else 0.0)
    lp = np.asarray(lp, dtype=float)
    if lp.ndim == 0:
        lp = np.full(ws.y.size, float(lp))

    if marginalized:
        delta, D, C = solve_delta_many(lp, sigma, rule)
        mu_marg = expit(lp)
        rate = mu_marg * (1.0 - mu_marg) / np.maximum(D, 1e-300)
        dds = -sigma * C / np.maximum(D, 1e-300)
    else:
        delta = lp
        rate = np.ones_like(lp)
        dds = np.zeros_like(lp)

    u = delta[:, None] + (sigma * t)[None, :]
    logbern = ws.y[:, None] * u - np.logaddexp(0.0, u)
    S = np.add.reduceat(logbern, ws.offsets, axis=0)

    include_size = layout.include_size
    domain_bad = None
    if include_size:
        alpha = th.alpha
        az = alpha[0] + alpha[1] * x_val + (ws.Z2 @ alpha[2:] if alpha.size > 2 else 0.0)
        az = np.asarray(az, dtype=float)
        if az.ndim == 0:
            az = np.full(Kc, float(az))
        if convention == "marginalized-size":
            domain_bad = az <= 0
            with np.errstate(invalid="ignore", divide="ignore"):
                omega = np.log(np.expm1(np.where(domain_bad, 1.0, az))) \
                    - 0.5 * gamma * gamma * sigma * sigma
                domega_da = 1.0 / (-np.expm1(-np.where(domain_bad, 1.0, az)))
            domega_dg = -gamma * sigma * sigma
            domega_ds = -gamma * gamma * sigma * sigma
        else:
            omega = az
            domega_da = np.ones(Kc)
            domega_dg = 0.0
            domega_ds = 0.0
        eta_sz = omega[:, None] + (gamma * sigma * t)[None, :]
        lam = np.exp(np.minimum(eta_sz, 700.0))
        logpois = ws.counts[:, None] * eta_sz - lam - ws.lgamma_counts[:, None]
        A = logw[None, :] + S + logpois
    else:
        A = logw[None, :] + S

    L, pi = _logsumexp_rows(A)
    if domain_bad is not None and np.any(domain_bad):
        L = np.where(domain_bad, -np.inf, L)
        pi = np.where(domain_bad[:, None], 0.0, pi)

    if not want_grad:
        return L, None

    G = np.zeros((Kc, layout.dim))
    p = expit(u)
    pi_units = pi[ws.unit_cl_local]
    pbar = np.einsum("uj,uj->u", pi_units, p)
    resid = ws.y - pbar

    gb = rate * resid
    gsum = np.add.reduceat(gb, ws.offsets)
    sl_b = layout.sl_beta
    G[:, sl_b.start] = gsum
    G[:, sl_b.start + 1] = x_val * gsum
    if beta.size > 2:
        G[:, sl_b.start + 2:sl_b.stop] = np.add.reduceat(
            gb[:, None] * ws.X2, ws.offsets, axis=0
        )

    # outcome contribution to d/ds: random-effect scale enters both u and delta
    P_seg = np.add.reduceat(p, ws.offsets, axis=0)
    T = ws.sum_y[:, None] - P_seg
    gs_out = sigma * np.einsum("kj,kj,j->k", pi, T, t)
    gs_out += np.add.reduceat(dds * resid, ws.offsets)

    if include_size:
        pois_resid = ws.counts[:, None] - lam
        pr_bar = np.einsum("kj,kj->k", pi, pois_resid)
        ca = pr_bar * domega_da
        sl_a = layout.sl_alpha
        G[:, sl_a.start] = ca
        G[:, sl_a.start + 1] = x_val * ca
        if th.alpha.size > 2:
            G[:, sl_a.start + 2:sl_a.stop] = ca[:, None] * ws.Z2
        gg_raw = sigma * np.einsum("kj,kj,j->k", pi, pois_resid, t)
        G[:, layout.idx_g(arm)] = gg_raw + domega_dg * pr_bar
        G[:, layout.idx_s(arm)] = gamma * gg_raw + domega_ds * pr_bar + gs_out
    else:
        G[:, layout.idx_s(arm)] = gs_out

    if domain_bad is not None and np.any(domain_bad):
        G[domain_bad] = 0.0
    return L, G


class EvalCache:
    """Memoizes the last few (theta -> value/gradient) evaluations so the
    optimizer's separate objective/gradient calls share work."""

    def __init__(self, evaluator, keep: int = 4):
        self._eval = evaluator
        self._keep = keep
        self._store: dict[bytes, tuple] = {}
        self._order: list[bytes] = []

    def _get(self, theta: np.ndarray, need_grad: bool):
        key = np.asarray(theta, dtype=float).tobytes()
        hit = self._store.get(key)
        if hit is not None and (not need_grad or hit[1] is not None):
            return hit
        f, g = self._eval(np.frombuffer(key, dtype=float).copy(), need_grad)
        self._store[key] = (f, g)
        self._order.append(key)
        while len(self._order) > self._keep:
            old = self._order.pop(0)
            if old != key:
                self._store.pop(old, None)
        return f, g

    def objective(self, theta: np.ndarray) -> float:
        return self._get(theta, need_grad=False)[0]

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self._get(theta, need_grad=True)[1]
