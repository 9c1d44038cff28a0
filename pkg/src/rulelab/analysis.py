"""Statistics over extracted feature records.

Covers the regression-based rule check (OLS line through the paired rule
features, R squared, and an error score that splits into a bias part and a
residual-spread part), conformance tallies, nearest-neighbor memorization
rates in a small feature embedding, and the closed-form Frechet distance
between Gaussians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .scenegen import RHO_TARGET
from .vision import FeatureRecord, verdict

# Ground-truth slope of y against x for each task's rule pair.
BETA1_TRUE = {"A": 1.0, "B": 1.0, "C": float(np.sqrt(2.0)), "D": 1.5}

DEFAULT_TRIM = (2.5, 97.5)


class AnalysisError(ValueError):
    """Raised for degenerate inputs (too few records, zero variance, ...)."""


@dataclass
class RegressionReport:
    task: str
    n_used: int
    n_trimmed: int
    n_invalid: int
    beta1_hat: float
    beta0_hat: float
    beta1_true: float
    r_squared: float
    bias_error: float
    variance_error: float
    error: float
    beta1_se: float
    beta0_se: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class MemorizationReport:
    dim: int
    n_query: int
    n_train: int
    distances: np.ndarray
    nn_indices: np.ndarray
    thresholds: np.ndarray
    rates: np.ndarray

    def to_json(self) -> str:
        d = {"dim": self.dim, "n_query": self.n_query, "n_train": self.n_train,
             "thresholds": self.thresholds.tolist(),
             "rates": self.rates.tolist()}
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise AnalysisError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise AnalysisError("covariance not symmetric within 1e-12")
        if np.linalg.eigvalsh(self.cov).min() < -1e-10:
            raise AnalysisError("covariance not positive semidefinite")


def rule_xy(record: FeatureRecord, task: str) -> tuple[float, float]:
    """The (x, y) rule pair whose relation y = beta1 * x encodes the rule."""
    f = record.features
    if task == "A":
        return f["l1"] * f["h2"], f["l2"] * f["h1"]
    if task == "B":
        return f["l1"] * f["h1"], f["l2"] * f["h2"]
    if task == "C":
        return f["r1"], f["r2"]
    return f["l1"], f["l2"]


def trim_by_ratio(ratios: np.ndarray,
                  trim: tuple[float, float] = DEFAULT_TRIM
                  ) -> tuple[np.ndarray, tuple[float, float]]:
    """Two-sided percentile trim on the ratio; returns (keep mask, bounds).

    Reapplying the returned bounds to the kept subset removes nothing, which
    is the idempotence contract tests rely on.
    """
    lo, hi = np.percentile(ratios, trim)
    return (ratios >= lo) & (ratios <= hi), (float(lo), float(hi))


def _ols(x: np.ndarray, y: np.ndarray):
    """OLS with intercept via the normal equations; returns estimates,
    standard errors and fitted values."""
    n = x.size
    X = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    b1, b0 = float(coef[0]), float(coef[1])
    yhat = b1 * x + b0
    resid = y - yhat
    dof = max(n - 2, 1)
    s2 = float(resid @ resid) / dof
    xtx_inv = np.linalg.inv(X.T @ X)
    se1, se0 = np.sqrt(np.maximum(s2 * np.diag(xtx_inv), 0.0))
    return b1, b0, float(se1), float(se0), yhat, resid, dof


def fit_rule_regression(records: list[FeatureRecord], task: str,
                        trim: tuple[float, float] = DEFAULT_TRIM
                        ) -> RegressionReport:
    """Fit y = beta1 x + beta0 on the task's rule pair after ratio trimming.

    The error score is |beta1_hat - beta1| + |beta0_hat| plus the residual
    standard deviation (n - 2 denominator).
    """
    valid = [r for r in records if r.valid]
    n_invalid = len(records) - len(valid)
    if len(valid) < 3:
        raise AnalysisError(f"need >= 3 valid records, got {len(valid)}")
    ratios = np.array([r.ratio for r in valid])
    keep, _ = trim_by_ratio(ratios, trim)
    kept = [r for r, k in zip(valid, keep) if k]
    n_trimmed = len(valid) - len(kept)
    if len(kept) < 3:
        raise AnalysisError("fewer than 3 records after trimming")
    xy = np.array([rule_xy(r, task) for r in kept])
    x, y = xy[:, 0], xy[:, 1]
    if np.ptp(x) == 0:
        raise AnalysisError("degenerate design: zero x-variance")
    b1, b0, se1, se0, yhat, resid, dof = _ols(x, y)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    beta1_true = BETA1_TRUE[task]
    bias = abs(b1 - beta1_true) + abs(b0)
    var_err = float(np.sqrt(ss_res / dof))
    return RegressionReport(
        task=task, n_used=len(kept), n_trimmed=n_trimmed, n_invalid=n_invalid,
        beta1_hat=b1, beta0_hat=b0, beta1_true=beta1_true, r_squared=r2,
        bias_error=bias, variance_error=var_err, error=bias + var_err,
        beta1_se=se1, beta0_se=se0)


def conformance_counts(records: list[FeatureRecord], task: str,
                       eps: float = 0.01) -> dict[str, int]:
    counts = {"invalid": 0, "coarse_violations": 0, "fine_conforming": 0}
    for r in records:
        if not r.valid:
            counts["invalid"] += 1
            continue
        v = verdict(r, task, eps)
        counts["coarse_violations"] += 0 if v.coarse_ok else 1
        counts["fine_conforming"] += 1 if v.fine_ok else 0
    return counts


_GEOM_KEYS = {
    "A": ("l1", "l2", "h1", "h2"),
    "B": ("l1", "l2", "h1", "h2"),
    "C": ("r1", "r2", "tangency_gap", "tangency_gap"),
    "D": ("l1", "l2", "small_in_top", "large_in_bottom"),
}


def embed(records: list[FeatureRecord], task: str, dim: int) -> np.ndarray:
    """4-D geometric embedding, or 13-D with per-element mean RGB appended."""
    if dim not in (4, 13):
        raise AnalysisError(f"embedding dim must be 4 or 13, got {dim}")
    rows = []
    keys = _GEOM_KEYS[task]
    for r in records:
        if not r.valid:
            continue
        row = [r.features[k] for k in keys]
        if dim == 13:
            names = sorted(r.mean_rgb)
            for name in names[:3]:
                row.extend(r.mean_rgb[name])
            while len(row) < 13:
                row.extend((0.0, 0.0, 0.0))
        rows.append(row[:dim])
    return np.array(rows, dtype=np.float64).reshape(-1, dim)


def memorization(query: np.ndarray, train: np.ndarray,
                 thresholds=None) -> MemorizationReport:
    """Exact nearest-neighbor distances of queries to the training set.

    Brute force with deterministic ties (lowest training index wins); the
    rate at threshold tau is the fraction of queries with distance <= tau.
    """
    query = np.asarray(query, dtype=np.float64)
    train = np.asarray(train, dtype=np.float64)
    if query.size == 0 or train.size == 0:
        raise AnalysisError("empty query or training set")
    if query.shape[1] != train.shape[1]:
        raise AnalysisError("dimension mismatch between query and train")
    if thresholds is None:
        thresholds = np.linspace(0.0, 0.5, 51)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    # Chunked exact distances keep memory bounded at desk scale.
    nn_d = np.empty(query.shape[0])
    nn_i = np.empty(query.shape[0], dtype=np.int64)
    chunk = 1024
    for s in range(0, query.shape[0], chunk):
        q = query[s:s + chunk]
        d2 = ((q[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)           # first minimum wins
        nn_i[s:s + len(q)] = idx
        nn_d[s:s + len(q)] = np.sqrt(d2[np.arange(len(q)), idx])
    rates = (nn_d[None, :] <= thresholds[:, None]).mean(axis=1)
    return MemorizationReport(dim=query.shape[1], n_query=query.shape[0],
                              n_train=train.shape[0], distances=nn_d,
                              nn_indices=nn_i, thresholds=thresholds,
                              rates=rates)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_fid(p: GaussianMoments, q: GaussianMoments) -> float:
    """Frechet distance between two Gaussians:
    ||mu_p - mu_q||^2 + Tr(Sig_p + Sig_q - 2 (Sig_p Sig_q)^{1/2}).

    The cross square root is computed as the symmetrized product
    A^{1/2} Sig_q A^{1/2} with A = Sig_p, which shares the trace of
    (Sig_p Sig_q)^{1/2} and stays in symmetric PSD territory.
    """
    if p.mean.size != q.mean.size:
        raise AnalysisError("dimension mismatch")
    dmu = p.mean - q.mean
    sp_half = _sqrtm_psd(p.cov)
    cross = _sqrtm_psd(sp_half @ q.cov @ sp_half)
    fid = float(dmu @ dmu + np.trace(p.cov) + np.trace(q.cov)
                - 2.0 * np.trace(cross))
    return max(fid, 0.0) if abs(fid) < 1e-10 else fid


def gmm_moments(n_draws: int, seed: int) -> GaussianMoments:
    """Monte Carlo first-two-moment estimate of the 2-D two-component
    mixture with means (1,1) and (-1,-1), identity covariance, equal weight."""
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=n_draws)
    x = signs[:, None] * np.ones(2) + rng.standard_normal((n_draws, 2))
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    return GaussianMoments(mean=mu, cov=cov)
