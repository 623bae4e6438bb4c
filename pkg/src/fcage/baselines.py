"""Lasso baselines on FC features, with correlation screening.

Features are screened by the exact two-sided t-test p-value of their
Pearson correlation with age (screening is fit on training subjects
only), then standardized, and fit by cyclic coordinate descent on

    (1/2n) ||y - X w||^2  +  lambda ||w||_1 .

The regularization weight comes from nested 5-fold cross-validation
over a 30-point logarithmic grid spanning three decades below the
critical lambda.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .fc_features import FCImage

LAMBDA_GRID_POINTS = 30
LAMBDA_GRID_DECADES = 3.0


@dataclass
class LassoModel:
    """Sparse linear model over retained features, in original units."""

    weights: np.ndarray
    intercept: float
    lam: float
    feature_index: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    converged: bool = True
    objective: list[float] = field(default_factory=list)
    trained_on: frozenset[str] = frozenset()

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x[:, self.feature_index] @ self.weights + self.intercept


def _columnwise_pearson(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson r of every column of x against y; constant columns give 0."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc, axis=0))
    sy = np.sqrt(np.sum(yc * yc))
    r = np.zeros(x.shape[1])
    ok = sx > 0
    r[ok] = (xc[:, ok].T @ yc) / (sx[ok] * sy)
    return np.clip(r, -1.0, 1.0)


def correlation_p_values(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-sided p-values of column-age correlations via the t-statistic.

    p = I_{nu/(nu+t^2)}(nu/2, 1/2) with nu = n - 2 degrees of freedom,
    the exact t CDF through the regularized incomplete beta function.
    """
    n = x.shape[0]
    if n < 4:
        raise ValueError("need at least 4 subjects for screening")
    if np.std(y) == 0.0:
        raise ValueError("zero-variance target")
    r = _columnwise_pearson(x, y)
    nu = n - 2
    denom = np.maximum(1.0 - r * r, 1e-300)
    t2 = r * r * nu / denom
    return betainc(nu / 2.0, 0.5, nu / (nu + t2))


def screen_features(x: np.ndarray, y: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    """Column ids whose correlation with y has two-sided p <= alpha."""
    p = correlation_p_values(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return np.flatnonzero(p <= alpha)


def _soft_threshold(v: float, lam: float) -> float:
    if v > lam:
        return v - lam
    if v < -lam:
        return v + lam
    return 0.0


def critical_lambda(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest lambda with an all-zero solution: max_j |X_j' y| / n."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xs = (x - mean) / std
    yc = y - y.mean()
    return float(np.max(np.abs(xs.T @ yc)) / x.shape[0]) if x.shape[1] else 0.0


def fit_lasso(
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = 1e-7,
    max_passes: int = 1000,
) -> LassoModel:
    """Cyclic coordinate descent; converged when max coefficient change < tol."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n, p = x.shape
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    live = std > 0
    std_safe = np.where(live, std, 1.0)
    xs = (x - mean) / std_safe
    y_mean = y.mean()
    yc = y - y_mean

    w = np.zeros(p)
    resid = yc.copy()
    objective: list[float] = []
    converged = False
    for _ in range(max_passes):
        max_delta = 0.0
        for j in range(p):
            if not live[j]:
                continue
            old = w[j]
            rho = xs[:, j] @ resid / n + old
            new = _soft_threshold(rho, lam)
            if new != old:
                resid += xs[:, j] * (old - new)
                w[j] = new
                max_delta = max(max_delta, abs(new - old))
        objective.append(
            float(resid @ resid) / (2.0 * n) + lam * float(np.abs(w).sum())
        )
        if max_delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"lasso did not converge in {max_passes} passes "
            f"(last max coefficient change >= {tol}); returning last iterate",
            RuntimeWarning,
        )

    w_orig = w / std_safe
    intercept = y_mean - float(w_orig @ mean)
    return LassoModel(
        weights=w_orig,
        intercept=intercept,
        lam=lam,
        feature_index=np.arange(p),
        mean=mean,
        std=std_safe,
        converged=converged,
        objective=objective,
    )


def lambda_grid_from(lam_max: float) -> np.ndarray:
    """30 log-spaced points from lam_max down three decades."""
    if lam_max <= 0:
        lam_max = 1e-12
    return np.geomspace(lam_max, lam_max * 10.0**-LAMBDA_GRID_DECADES, LAMBDA_GRID_POINTS)


def select_lambda_nested(
    x: np.ndarray,
    y: np.ndarray,
    outer_train_ids: np.ndarray,
    k_inner: int = 5,
    lambda_grid: np.ndarray | None = None,
    seed: int = 0,
) -> float:
    """Inner k-fold CV over the lambda grid; smallest mean MAE wins, ties
    going to the larger (sparser) lambda."""
    outer_train_ids = np.asarray(outer_train_ids)
    if outer_train_ids.size < 10:
        raise ValueError("need at least 10 training subjects for nested CV")
    xt = np.asarray(x, dtype=np.float64)[outer_train_ids]
    yt = np.asarray(y, dtype=np.float64)[outer_train_ids]
    if np.std(yt) == 0.0:
        raise ValueError("degenerate fold: all ages identical")
    if lambda_grid is None:
        lambda_grid = lambda_grid_from(critical_lambda(xt, yt))
    lambda_grid = np.sort(np.asarray(lambda_grid, dtype=np.float64))[::-1]

    rng = np.random.default_rng(seed)
    order = rng.permutation(outer_train_ids.size)
    fold_of = np.empty(outer_train_ids.size, dtype=int)
    fold_of[order] = np.arange(outer_train_ids.size) % k_inner

    maes = np.zeros(len(lambda_grid))
    for f in range(k_inner):
        tr = fold_of != f
        va = ~tr
        if np.std(yt[tr]) == 0.0:
            raise ValueError("degenerate inner fold: all ages identical")
        for i, lam in enumerate(lambda_grid):
            model = fit_lasso(xt[tr], yt[tr], lam)
            pred = model.predict(xt[va])
            maes[i] += float(np.mean(np.abs(pred - yt[va])))
    maes /= k_inner
    # grid is sorted descending, so argmin lands on the largest lambda
    # among ties
    return float(lambda_grid[int(np.argmin(maes))])


def flatten_fc(fc: FCImage) -> np.ndarray:
    """Channel-major concatenation of all voxel values."""
    return np.asarray(fc.data, dtype=np.float64).reshape(-1)
