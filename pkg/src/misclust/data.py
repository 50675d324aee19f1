"""Canonical in-memory representation of clustered datasets, parameter
vectors, and fit outputs shared by all estimators.

Datasets are immutable after construction; concurrent reads are safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "UnitRecord",
    "ClusterRecord",
    "Dataset",
    "JmmParams",
    "FitResult",
    "SizeBinRow",
    "validate",
    "summarize_by_size",
    "DEFAULT_SIZE_BINS",
]

DEFAULT_SIZE_BINS: Tuple[int, ...] = (1, 2, 3, 4)


@dataclass(frozen=True)
class UnitRecord:
    """One unit: binary outcome and unit-level covariates."""

    y: int
    x2: Tuple[float, ...] = ()


@dataclass(frozen=True)
class ClusterRecord:
    """One cluster: size, exposure fields, validation flag, and units.

    ``w1`` is the error-prone exposure observed everywhere; ``x1_true`` is
    the gold-standard exposure, observed when ``r == 1`` (and carried for
    every synthetic cluster so oracle fits are possible).
    """

    id: str
    n: int
    w1: int
    r: int
    units: Tuple[UnitRecord, ...]
    x1_true: Optional[int] = None
    z2: Tuple[float, ...] = ()

    def validated_x1(self) -> int:
        """True exposure via the validation path; raises unless r == 1.

        Correction estimators must read the true exposure through this
        accessor so they can never touch it outside the validation sample.
        """
        if self.r != 1:
            raise ValueError(f"cluster {self.id}: true exposure requested but r=0")
        if self.x1_true is None:
            raise ValueError(f"cluster {self.id}: r=1 but x1_true is missing")
        return self.x1_true


@dataclass(frozen=True)
class Dataset:
    clusters: Tuple[ClusterRecord, ...]
    x2_names: Tuple[str, ...] = ()
    z2_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "x2_names", tuple(self.x2_names))
        object.__setattr__(self, "z2_names", tuple(self.z2_names))

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_units(self) -> int:
        return sum(c.n for c in self.clusters)

    def validation_subset(self) -> "Dataset":
        return Dataset(
            clusters=tuple(c for c in self.clusters if c.r == 1),
            x2_names=self.x2_names,
            z2_names=self.z2_names,
        )


@dataclass(frozen=True)
class JmmParams:
    """Joint-model parameter vector, plus correction blocks when present.

    ``alpha`` is the size model, ``beta`` the outcome model; ``sigma0`` /
    ``sigma1`` and ``gamma0`` / ``gamma1`` are random-effect scale and
    size-loading by exposure arm. ``nu`` (misclassification), ``eta``
    (exposure prevalence), and ``xi`` (conditional exposure) are optional.
    """

    alpha: np.ndarray
    beta: np.ndarray
    sigma0: float
    sigma1: float
    gamma0: float = 0.0
    gamma1: float = 0.0
    nu: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        for name in ("nu", "eta", "xi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ValueError("sigma0 and sigma1 must be positive")

    def sigma(self, x1: int) -> float:
        return self.sigma1 if x1 else self.sigma0

    def gamma(self, x1: int) -> float:
        return self.gamma1 if x1 else self.gamma0


@dataclass(frozen=True)
class FitResult:
    """Estimates with covariance and 95% Wald intervals."""

    method: str
    param_names: Tuple[str, ...]
    estimates: np.ndarray
    covariance: Optional[np.ndarray]
    converged: bool
    loglik: Optional[float] = None
    n_clusters: int = 0
    notes: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "estimates", np.asarray(self.estimates, dtype=float))
        if self.covariance is not None:
            object.__setattr__(
                self, "covariance", np.asarray(self.covariance, dtype=float)
            )

    @property
    def se(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(self.estimates.shape, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def ci(self) -> np.ndarray:
        """(p, 2) array of estimate +/- 1.96 * SE."""
        se = self.se
        return np.column_stack([self.estimates - 1.96 * se, self.estimates + 1.96 * se])

    def estimate(self, name: str) -> float:
        return float(self.estimates[self.param_names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.param_names.index(name)])

    def ci_of(self, name: str) -> Tuple[float, float]:
        lo, hi = self.ci[self.param_names.index(name)]
        return float(lo), float(hi)


def validate(dataset: Dataset) -> list[str]:
    """Return every invariant violation, tagged with the cluster id."""
    violations: list[str] = []
    if len(dataset.clusters) == 0:
        violations.append("dataset: no clusters")
    for c in dataset.clusters:
        if c.n < 1:
            violations.append(f"cluster {c.id}: size n={c.n} < 1")
        if c.n != len(c.units):
            violations.append(
                f"cluster {c.id}: n={c.n} but {len(c.units)} unit records"
            )
        if c.w1 not in (0, 1):
            violations.append(f"cluster {c.id}: w1={c.w1} not binary")
        if c.r not in (0, 1):
            violations.append(f"cluster {c.id}: r={c.r} not binary")
        if c.r == 1 and c.x1_true is None:
            violations.append(f"cluster {c.id}: validated (r=1) but x1_true absent")
        if c.x1_true is not None and c.x1_true not in (0, 1):
            violations.append(f"cluster {c.id}: x1_true={c.x1_true} not binary")
        if len(c.z2) != len(dataset.z2_names):
            violations.append(
                f"cluster {c.id}: {len(c.z2)} z2 values, expected {len(dataset.z2_names)}"
            )
        for i, u in enumerate(c.units):
            if u.y not in (0, 1):
                violations.append(f"cluster {c.id} unit {i}: y={u.y} not binary")
            if len(u.x2) != len(dataset.x2_names):
                violations.append(
                    f"cluster {c.id} unit {i}: {len(u.x2)} x2 values, "
                    f"expected {len(dataset.x2_names)}"
                )
            elif not all(math.isfinite(v) for v in u.x2):
                violations.append(f"cluster {c.id} unit {i}: non-finite x2")
    return violations


@dataclass(frozen=True)
class SizeBinRow:
    bin_label: str
    clusters: int
    outcome_pct: float
    exposure_pct: float
    sensitivity_pct: float
    specificity_pct: float


def _rate(num: int, den: int) -> float:
    return 100.0 * num / den if den > 0 else float("nan")


def summarize_by_size(dataset: Dataset,
                      size_bins: Sequence[int] = DEFAULT_SIZE_BINS) -> list[SizeBinRow]:
    """Per-size-bin cluster counts, outcome/exposure prevalence, and
    misclassification rates.

    Sensitivity and specificity are computed over validated clusters only.
    The last bin is open-ended (labelled "<size>+"); empty bins yield NaN
    rates.
    """
    bins = list(size_bins)
    if bins != sorted(set(bins)) or not bins:
        raise ValueError("size_bins must be nonempty and strictly increasing")
    rows = []
    for bi, lo in enumerate(bins):
        last = bi == len(bins) - 1
        hi = math.inf if last else bins[bi + 1]
        members = [c for c in dataset.clusters if lo <= c.n < hi]
        n_units = sum(c.n for c in members)
        n_events = sum(u.y for c in members for u in c.units)
        n_exposed = sum(c.w1 for c in members)
        val = [c for c in members if c.r == 1]
        tp = sum(1 for c in val if c.validated_x1() == 1 and c.w1 == 1)
        pos = sum(1 for c in val if c.validated_x1() == 1)
        tn = sum(1 for c in val if c.validated_x1() == 0 and c.w1 == 0)
        neg = sum(1 for c in val if c.validated_x1() == 0)
        rows.append(
            SizeBinRow(
                bin_label=f"{lo}+" if last else str(lo),
                clusters=len(members),
                outcome_pct=_rate(n_events, n_units),
                exposure_pct=_rate(n_exposed, len(members)),
                sensitivity_pct=_rate(tp, pos),
                specificity_pct=_rate(tn, neg),
            )
        )
    return rows
