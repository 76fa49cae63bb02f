"""Regression models for biomass estimation: OLS with exhaustive subset
search and epsilon-SVR with an RBF kernel, plus the seeded split and
repeated cross-validation machinery used for hyperparameter tuning.

Kernel convention: k(u, v) = exp(-sigma * ||u - v||^2) with sigma the grid
variable itself (an inverse width). Reported optima like sigma = 0.25 or 3
only make sense under this parameterization, so it is pinned here; do not
confuse sigma with a Gaussian bandwidth.

The SVR dual in the single-coefficient form (beta_i = alpha_i - alpha_i*,
|beta_i| <= C, sum beta = 0) is solved by sequential pairwise optimization:
pick the most violating pair, minimize the piecewise-quadratic restriction
of the objective along e_i - e_j exactly, repeat until the KKT gap closes.
Features and target are standardized on the training data first.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

DEFAULT_SEED = 123
DEFAULT_EPSILON = 0.1
KKT_TOL = 1e-6
DEFAULT_SIGMA_GRID = (0.2, 0.25, 0.3, 0.5, 1.0, 2.0, 3.0)
DEFAULT_COST_GRID = (1.0, 2.0, 3.0, 4.0, 5.0)


class DegeneratePredictionError(NumericalError):
    """Predictions carry no variance, so correlation-based scores are undefined."""


@dataclass(frozen=True)
class OLSModel:
    names: tuple[str, ...]
    coefficients: np.ndarray
    intercept: float
    loo_rmse: float = math.nan
    skipped_subsets: tuple[tuple[str, ...], ...] = ()

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(self.names) == 0:  # intercept-only: features are ignored
            return np.full(X.shape[0], self.intercept)
        if X.shape[1] != len(self.names):
            raise DataError(f"expected {len(self.names)} feature columns, got {X.shape[1]}")
        return X @ self.coefficients + self.intercept


@dataclass(frozen=True)
class SVRModel:
    names: tuple[str, ...]
    support_vectors: np.ndarray   # standardized training rows
    dual_coefficients: np.ndarray
    bias: float                   # standardized-target scale
    sigma: float
    cost: float
    epsilon: float
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    iterations: int = 0

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.names):
            raise DataError(f"expected {len(self.names)} feature columns, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_std

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xs = self._standardize(X)
        if self.support_vectors.size == 0:
            fs = np.full(Xs.shape[0], self.bias)
        else:
            k = rbf_kernel(Xs, self.support_vectors, self.sigma)
            fs = k @ self.dual_coefficients + self.bias
        return fs * self.y_std + self.y_mean


@dataclass(frozen=True)
class CVScheme:
    """Repeated seeded holdout: `repeats` rounds of train/validate splits."""

    seed: int = DEFAULT_SEED
    repeats: int = 9
    train_fraction: float = 0.8

    def splits(self, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
        if n < 3:
            raise DataError("cross-validation needs at least 3 rows")
        k = min(math.ceil(self.train_fraction * n), n - 1)
        rng = np.random.default_rng(self.seed)
        out = []
        for _ in range(self.repeats):
            perm = rng.permutation(n)
            out.append((np.sort(perm[:k]), np.sort(perm[k:])))
        return out


def rbf_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    a2 = (A * A).sum(axis=1)[:, None]
    b2 = (B * B).sum(axis=1)[None, :]
    d2 = np.maximum(a2 + b2 - 2.0 * A @ B.T, 0.0)
    return np.exp(-sigma * d2)


def split_80_20(n: int, seed: int = DEFAULT_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split: first ceil(0.8 n) shuffled rows train, rest test."""
    if n < 5:
        raise DataError("need at least 5 rows for an 80/20 split")
    perm = np.random.default_rng(seed).permutation(n)
    k = math.ceil(0.8 * n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def _loo_rmse(A: np.ndarray, y: np.ndarray) -> float | None:
    """Leave-one-out RMSE of a least-squares fit via the hat-matrix identity.

    Returns None when the design is rank deficient or some leverage hits 1.
    """
    q, r = np.linalg.qr(A)
    diag = np.abs(np.diag(r))
    if diag.size and (diag.min() <= 1e-10 * max(diag.max(), 1.0)):
        return None
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ beta
    leverage = (q * q).sum(axis=1)
    if np.any(leverage >= 1.0 - 1e-10):
        return None
    loo = resid / (1.0 - leverage)
    return float(np.sqrt((loo ** 2).mean()))


def fit_ols(X: np.ndarray, y: np.ndarray, names: list[str],
            max_vars: int = 3) -> OLSModel:
    """Exhaustive best-subset OLS, scored by leave-one-out RMSE.

    Every subset of the candidates up to `max_vars` (including the
    intercept-only model) is fit by least squares; the lowest LOO RMSE
    wins, with ties broken toward fewer variables then name order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if X.shape != (n, len(names)):
        raise DataError("design matrix does not match names/target")
    if n <= max_vars + 1:
        raise DataError(f"{n} rows cannot support {max_vars}-variable models")

    best = None
    skipped: list[tuple[str, ...]] = []
    indices = range(len(names))
    # RMSEs within float noise of each other count as ties; prefer the
    # smaller subset then name order so noise-free targets recover exactly
    rmse_tol = 1e-9 * (float(np.abs(y).max()) + 1.0)
    subsets = itertools.chain.from_iterable(
        itertools.combinations(indices, k) for k in range(0, max_vars + 1))
    for subset in subsets:
        A = np.column_stack([np.ones(n)] + [X[:, j] for j in subset])
        rmse = _loo_rmse(A, y)
        if rmse is None:
            skipped.append(tuple(names[j] for j in subset))
            continue
        key = (len(subset), tuple(names[j] for j in subset))
        if best is None or rmse < best[0] - rmse_tol or \
                (rmse <= best[0] + rmse_tol and key < best[1]):
            beta, *_ = np.linalg.lstsq(A, y, rcond=None)
            best = (rmse, key, subset, beta)
    if best is None:
        raise NumericalError("every candidate subset was rank deficient")
    rmse, _, subset, beta = best
    return OLSModel(
        names=tuple(names[j] for j in subset),
        coefficients=beta[1:].copy(),
        intercept=float(beta[0]),
        loo_rmse=rmse,
        skipped_subsets=tuple(skipped),
    )


def r_squared(predictions: np.ndarray, observations: np.ndarray) -> float:
    """Square of Pearson's correlation between predictions and observations.

    By definition this rewards any linear association, including a
    perfectly anti-correlated model (r = -1 gives R^2 = 1).
    """
    p = np.asarray(predictions, dtype=np.float64)
    o = np.asarray(observations, dtype=np.float64)
    if p.shape != o.shape or p.size < 2:
        raise DataError("need two equal-length vectors of at least 2 entries")
    pc = p - p.mean()
    oc = o - o.mean()
    denom = math.sqrt(float((pc * pc).sum()) * float((oc * oc).sum()))
    if denom == 0.0:
        raise DegeneratePredictionError("zero-variance predictions or observations")
    return float(((pc * oc).sum() / denom) ** 2)


def _solve_pair(beta_i: float, beta_j: float, gi: float, gj: float,
                eta: float, eps: float, C: float) -> float:
    """Exact minimizer of the dual objective along e_i - e_j.

    phi(t) = 0.5 eta t^2 + (gi - gj) t + eps(|beta_i + t| - |beta_i|)
                                       + eps(|beta_j - t| - |beta_j|)
    restricted to the box that keeps both coefficients within [-C, C].
    """
    lo = max(-C - beta_i, beta_j - C)
    hi = min(C - beta_i, beta_j + C)
    if lo > hi:
        return 0.0
    eta = max(eta, 1e-12)
    candidates = [lo, hi, -beta_i, beta_j]
    for si in (-1.0, 1.0):
        for sj in (-1.0, 1.0):
            candidates.append(-(gi - gj + eps * si - eps * sj) / eta)

    def phi(t):
        return (0.5 * eta * t * t + (gi - gj) * t
                + eps * (abs(beta_i + t) - abs(beta_i))
                + eps * (abs(beta_j - t) - abs(beta_j)))

    best_t = 0.0
    best_val = 0.0
    for t in candidates:
        t = min(max(t, lo), hi)
        v = phi(t)
        if v < best_val - 1e-15:
            best_val = v
            best_t = t
    return best_t


def fit_svr(X: np.ndarray, y: np.ndarray, names: list[str], sigma: float,
            cost: float, epsilon: float = DEFAULT_EPSILON, tol: float = KKT_TOL,
            max_iter: int = 200_000) -> SVRModel:
    """Train epsilon-SVR with the RBF kernel by pairwise dual optimization."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < 3:
        raise DataError("SVR training needs at least 3 rows")
    if sigma <= 0 or cost <= 0:
        raise ValueError("sigma and cost must be positive")

    x_mean = X.mean(axis=0)
    x_std = X.std(axis=0)
    x_std = np.where(x_std < 1e-12, 1.0, x_std)
    Xs = (X - x_mean) / x_std
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std < 1e-12:
        # constant target: the empty model predicts the mean exactly
        return SVRModel(names=tuple(names), support_vectors=Xs[:0],
                        dual_coefficients=np.empty(0), bias=0.0, sigma=sigma,
                        cost=cost, epsilon=epsilon, x_mean=x_mean, x_std=x_std,
                        y_mean=y_mean, y_std=1.0)
    ys = (y - y_mean) / y_std

    K = rbf_kernel(Xs, Xs, sigma)
    beta = np.zeros(n)
    g = -ys  # gradient of the smooth part: K beta - y
    iterations = 0
    converged = False
    C = float(cost)
    while iterations < max_iter:
        iterations += 1
        sign_up = np.where(beta >= 0.0, 1.0, -1.0)
        sign_dn = np.where(beta <= 0.0, -1.0, 1.0)
        up = g + epsilon * sign_up
        dn = g + epsilon * sign_dn
        up[beta >= C - 1e-12] = np.inf
        dn[beta <= -C + 1e-12] = -np.inf
        i = int(np.argmin(up))
        j = int(np.argmax(dn))
        gap = dn[j] - up[i]
        if gap <= tol:
            converged = True
            break
        eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
        t = _solve_pair(beta[i], beta[j], g[i], g[j], eta, epsilon, C)
        if t == 0.0:
            converged = gap <= tol
            break
        beta[i] += t
        beta[j] -= t
        g += t * (K[:, i] - K[:, j])
    if not converged:
        raise NumericalError(
            f"SVR did not reach KKT tolerance {tol} in {max_iter} iterations")

    finite_up = up[np.isfinite(up)]
    finite_dn = dn[np.isfinite(dn)]
    hi = finite_up.min() if finite_up.size else -finite_dn.max()
    lo = finite_dn.max() if finite_dn.size else -finite_up.min()
    bias = float(-(hi + lo) / 2.0)

    support = np.abs(beta) > 1e-12
    return SVRModel(
        names=tuple(names),
        support_vectors=Xs[support].copy(),
        dual_coefficients=beta[support].copy(),
        bias=bias,
        sigma=sigma,
        cost=C,
        epsilon=epsilon,
        x_mean=x_mean,
        x_std=x_std,
        y_mean=y_mean,
        y_std=y_std,
        iterations=iterations,
    )


def kkt_residual(model: SVRModel, X: np.ndarray, y: np.ndarray) -> float:
    """Worst KKT violation of a trained SVR on its training set
    (standardized scale). Zero means every optimality condition holds."""
    Xs = model._standardize(X)
    ys = (np.asarray(y, dtype=np.float64) - model.y_mean) / model.y_std
    if model.support_vectors.size == 0:
        return float(np.max(np.maximum(np.abs(ys - model.bias) - model.epsilon, 0.0), initial=0.0))
    k = rbf_kernel(Xs, model.support_vectors, model.sigma)
    f = k @ model.dual_coefficients + model.bias
    resid = ys - f
    beta = np.zeros(len(ys))
    # map support coefficients back onto the full training set by row identity
    sv_index = 0
    for row in range(len(ys)):
        if sv_index < len(model.support_vectors) and \
                np.array_equal(Xs[row], model.support_vectors[sv_index]):
            beta[row] = model.dual_coefficients[sv_index]
            sv_index += 1
    eps = model.epsilon
    C = model.cost
    worst = 0.0
    for b, r in zip(beta, resid):
        if b >= C - 1e-9:
            v = max(0.0, eps - r)
        elif b <= -C + 1e-9:
            v = max(0.0, r + eps)
        elif b > 1e-9:
            v = abs(r - eps)
        elif b < -1e-9:
            v = abs(r + eps)
        else:
            v = max(0.0, abs(r) - eps)
        worst = max(worst, v)
    return worst


@dataclass
class GridSearchResult:
    best_sigma: float
    best_cost: float
    best_rmse: float
    surface: list[tuple[float, float, float]] = field(default_factory=list)

    def write_surface_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("sigma,cost,mean_rmse\n")
            for sigma, cost, rmse in self.surface:
                fh.write(f"{sigma!r},{cost!r},{rmse!r}\n")


def grid_search(X: np.ndarray, y: np.ndarray, names: list[str],
                sigma_grid=DEFAULT_SIGMA_GRID, cost_grid=DEFAULT_COST_GRID,
                scheme: CVScheme | None = None,
                epsilon: float = DEFAULT_EPSILON) -> GridSearchResult:
    """Mean validation RMSE of every (sigma, C) cell over the seeded
    repeated splits; the lowest mean wins, ties toward smaller C then
    smaller sigma. All cells share the same splits."""
    if not len(sigma_grid) or not len(cost_grid):
        raise DataError("empty hyperparameter grid")
    scheme = scheme or CVScheme()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    splits = scheme.splits(len(y))
    for train, _ in splits:
        if len(train) < 3:
            raise DataError("degenerate training set in a cross-validation repeat")

    surface = []
    best = None
    for sigma in sigma_grid:
        for cost in cost_grid:
            errors = []
            for train, validate in splits:
                model = fit_svr(X[train], y[train], names, sigma, cost, epsilon)
                pred = model.predict(X[validate])
                errors.append(math.sqrt(float(((pred - y[validate]) ** 2).mean())))
            mean_rmse = float(np.mean(errors))
            surface.append((float(sigma), float(cost), mean_rmse))
            key = (mean_rmse, cost, sigma)
            if best is None or key < best:
                best = key
    rmse, cost, sigma = best
    return GridSearchResult(best_sigma=float(sigma), best_cost=float(cost),
                            best_rmse=rmse, surface=surface)


def save_model(model: OLSModel | SVRModel, path) -> None:
    if isinstance(model, OLSModel):
        payload = {
            "type": "ols",
            "names": list(model.names),
            "coefficients": [float(c) for c in model.coefficients],
            "intercept": model.intercept,
            "loo_rmse": model.loo_rmse,
        }
    else:
        payload = {
            "type": "svr",
            "names": list(model.names),
            "support_vectors": model.support_vectors.tolist(),
            "dual_coefficients": model.dual_coefficients.tolist(),
            "bias": model.bias,
            "sigma": model.sigma,
            "cost": model.cost,
            "epsilon": model.epsilon,
            "x_mean": model.x_mean.tolist(),
            "x_std": model.x_std.tolist(),
            "y_mean": model.y_mean,
            "y_std": model.y_std,
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_model(path) -> OLSModel | SVRModel:
    with open(path) as fh:
        payload = json.load(fh)
    kind = payload.get("type")
    if kind == "ols":
        return OLSModel(
            names=tuple(payload["names"]),
            coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
            intercept=float(payload["intercept"]),
            loo_rmse=float(payload.get("loo_rmse", math.nan)),
        )
    if kind == "svr":
        return SVRModel(
            names=tuple(payload["names"]),
            support_vectors=np.asarray(payload["support_vectors"],
                                       dtype=np.float64).reshape(-1, len(payload["names"])),
            dual_coefficients=np.asarray(payload["dual_coefficients"], dtype=np.float64),
            bias=float(payload["bias"]),
            sigma=float(payload["sigma"]),
            cost=float(payload["cost"]),
            epsilon=float(payload["epsilon"]),
            x_mean=np.asarray(payload["x_mean"], dtype=np.float64),
            x_std=np.asarray(payload["x_std"], dtype=np.float64),
            y_mean=float(payload["y_mean"]),
            y_std=float(payload["y_std"]),
        )
    raise DataError(f"{path}: unknown model type {kind!r}")
