"""Conditional-mean nuisance models.

Two pluggable estimators of E(Y|x) fitted within one treatment arm:
a weighted-IRLS logistic regression and a k-nearest-neighbour smoother.
Predictions are clamped to [CLAMP, 1-CLAMP] because downstream moment
ratios divide by quantities built from these means.

The weights argument exists so perturbation resampling can refit the
nuisances under random weights; unit weights reproduce the plain fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateDesign, DimensionMismatch, EmptyTrainingSet
from .propensity import expit

CLAMP = 1e-6
SEPARATION_BOUND = 30.0
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100


def default_knn_k(n_train: int) -> int:
    """Default neighbourhood size ceil(n^(4/5) / 2)."""
    return max(1, int(np.ceil(n_train ** 0.8 / 2.0)))


def _clamp(p):
    return np.clip(p, CLAMP, 1.0 - CLAMP)


@dataclass(frozen=True)
class LogisticModel:
    """Fitted weighted logistic regression, intercept first in coef."""

    coef: np.ndarray
    arm: int
    dim: int
    warnings: tuple = ()
    fit_rows: frozenset | None = None  # provenance for cross-fitting leak checks

    kind = "logistic"

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        return _clamp(expit(self.coef[0] + x @ self.coef[1:]))


@dataclass(frozen=True)
class KnnModel:
    """k-nearest-neighbour conditional mean on standardized features."""

    train: np.ndarray          # standardized training features
    labels: np.ndarray
    weights: np.ndarray
    k: int
    arm: int
    dim: int
    center: np.ndarray = field(repr=False, default=None)
    scale: np.ndarray = field(repr=False, default=None)
    warnings: tuple = ()
    fit_rows: frozenset | None = None

    kind = "knn"

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        q = (x - self.center) / self.scale
        # squared Euclidean distances, queries x training
        d2 = ((q[:, None, :] - self.train[None, :, :]) ** 2).sum(axis=2)
        # stable argsort keeps row order on ties
        idx = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        lab = self.labels[idx]
        wt = self.weights[idx]
        wsum = wt.sum(axis=1)
        out = np.where(wsum > 0, (lab * wt).sum(axis=1) / np.where(wsum > 0, wsum, 1.0),
                       lab.mean(axis=1))
        return _clamp(out)


@dataclass(frozen=True)
class NuisancePair:
    """Control-arm model p0 and (optionally) treated-arm model p1."""

    p0: object
    p1: object | None = None

    def __post_init__(self):
        if self.p0 is not None and getattr(self.p0, "arm", 0) != 0:
            raise ValueError("p0 must be fitted on the control arm")
        if self.p1 is not None and getattr(self.p1, "arm", 1) != 1:
            raise ValueError("p1 must be fitted on the treated arm")


def fit_logistic(features, labels, weights=None, arm=0, fit_rows=None) -> LogisticModel:
    """Maximum weighted-likelihood logistic fit by IRLS, with intercept.

    Converges when the largest coefficient step falls below 1e-8 (at most
    100 iterations).  Quasi-separation (any |coefficient| > 30) returns
    the fit with a "separation" warning; predictions stay clamped.
    A single-valued label vector returns the constant model predicting
    the clamped label mean.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    lab = np.asarray(labels, dtype=float).ravel()
    n, r = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if lab.shape[0] != n or w.shape[0] != n:
        raise DimensionMismatch("features, labels, weights must share length")
    if n == 0:
        raise EmptyTrainingSet("no rows to fit")
    if not np.any(w > 0):
        raise ValueError("weights must not be all zero")
    if n < r + 1:
        raise DegenerateDesign(f"need at least {r + 1} rows for {r} features, got {n}")

    active = lab[w > 0]
    if np.all(active == active[0]):
        mean = _clamp(np.array([active[0]]))[0]
        coef = np.zeros(r + 1)
        coef[0] = np.log(mean / (1.0 - mean))
        return LogisticModel(coef, arm, r, ("all labels identical",), _rows(fit_rows))

    design = np.hstack([np.ones((n, 1)), X])
    coef = np.zeros(r + 1)
    warnings = ()
    for _ in range(IRLS_MAX_ITER):
        p = expit(design @ coef)
        grad = design.T @ (w * (lab - p))
        curv = w * p * (1.0 - p)
        hess = design.T @ (design * curv[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            try:
                step = np.linalg.solve(hess + 1e-8 * np.eye(r + 1), grad)
            except np.linalg.LinAlgError:
                raise DegenerateDesign("weighted design is rank deficient") from None
        if not np.all(np.isfinite(step)):
            raise DegenerateDesign("IRLS step is not finite")
        coef = coef + step
        if np.max(np.abs(coef)) > SEPARATION_BOUND:
            warnings = ("separation",)
            break
        if np.max(np.abs(step)) < IRLS_TOL:
            break
    return LogisticModel(coef, arm, r, warnings, _rows(fit_rows))


def fit_knn(features, labels, weights=None, k=None, arm=0, fit_rows=None) -> KnnModel:
    """k-NN conditional mean under Euclidean distance on standardized features.

    Ties in distance are broken by training-row index, so refits are
    bit-reproducible.  k defaults to ceil(n^(4/5)/2).
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    lab = np.asarray(labels, dtype=float).ravel()
    n, r = X.shape
    if n == 0:
        raise EmptyTrainingSet("no rows to fit")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if k is None:
        k = default_knn_k(n)
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return KnnModel((X - center) / scale, lab.copy(), w.copy(), k, arm, r,
                    center, scale, (), _rows(fit_rows))


def _rows(rows):
    return None if rows is None else frozenset(int(i) for i in rows)


def predict(model, x):
    """Evaluate a fitted conditional-mean model; output in [CLAMP, 1-CLAMP]."""
    out = model.predict(np.atleast_2d(np.asarray(x, dtype=float)))
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def fit_pair(ds, kind="logistic", weights=None, k=None, need_p1=True,
             rows0=None, rows1=None) -> NuisancePair:
    """Fit p0 on control rows and, when needed, p1 on treated rows of ds.

    rows0/rows1 restrict the fit to a subset (used by cross-fitting);
    defaults use every row of the matching arm.
    """
    w = np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float).ravel()
    X = ds.x
    idx0 = np.nonzero(ds.t == 0)[0] if rows0 is None else np.asarray(rows0)
    if idx0.size == 0:
        raise EmptyTrainingSet("no control rows to fit p0")

    def fit(idx, arm):
        if kind == "logistic":
            return fit_logistic(X[idx], ds.y[idx], w[idx], arm=arm, fit_rows=idx)
        if kind == "knn":
            kk = default_knn_k(idx.size) if k is None else min(int(k), idx.size)
            return fit_knn(X[idx], ds.y[idx], w[idx], k=kk, arm=arm, fit_rows=idx)
        raise ValueError(f"unknown nuisance kind {kind!r}")

    p0 = fit(idx0, 0)
    p1 = None
    if need_p1:
        idx1 = np.nonzero(ds.t == 1)[0] if rows1 is None else np.asarray(rows1)
        if idx1.size == 0:
            raise EmptyTrainingSet("no treated rows to fit p1")
        p1 = fit(idx1, 1)
    return NuisancePair(p0, p1)
