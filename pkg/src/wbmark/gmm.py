"""Diagonal-covariance Gaussian mixture fitted by EM.

Deterministic given the seed (k-means++-style center seeding), keeps the
log-likelihood trace, and raises FittingError when the trace has not
converged within the iteration budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wbmark.errors import FittingError, InputError

_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmModel:
    means: np.ndarray        # (S, D)
    variances: np.ndarray    # (S, D), diagonal covariances
    weights: np.ndarray      # (S,)
    loglik_trace: list[float]
    converged: bool

    @property
    def n_components(self) -> int:
        return int(self.means.shape[0])

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Per-component log joint log(pi_k N(x | mu_k, var_k)), shape (N, S)."""
        x = np.asarray(x, dtype=np.float64)
        inv = 1.0 / self.variances                                   # (S, D)
        quad = ((x ** 2) @ inv.T - 2.0 * (x @ (self.means * inv).T)
                + np.sum(self.means ** 2 * inv, axis=1))
        logdet = np.sum(np.log(self.variances), axis=1)
        return (np.log(self.weights) - 0.5 * (quad + logdet + x.shape[1] * _LOG2PI))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_prob(x), axis=1)

    def responsibilities(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        lp = self.log_prob(x)
        m = lp.max(axis=1, keepdims=True)
        p = np.exp(lp - m)
        norm = p.sum(axis=1, keepdims=True)
        loglik = float(np.sum(np.log(norm) + m))
        return p / norm, loglik


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=probs)])
        d2 = np.minimum(d2, np.sum((x - centers[-1]) ** 2, axis=1))
    return np.stack(centers)


def fit_gmm(x: np.ndarray, n_components: int, seed: int,
            max_iter: int = 100, tol: float = 1e-4,
            var_floor: float = 1e-6) -> GmmModel:
    """EM fit of a diagonal GMM; tol is on the mean log-likelihood change."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components:
        raise InputError(f"need a (N, D) matrix with N >= {n_components}, got {x.shape}")
    if n_components < 1:
        raise InputError("n_components must be >= 1")
    n, d = x.shape
    rng = np.random.default_rng(seed)

    global_var = x.var(axis=0) + var_floor
    if n_components == 1:
        mu = x.mean(axis=0, keepdims=True)
        ll = float(np.sum(GmmModel(mu, global_var[None, :], np.ones(1), [], True).log_prob(x)))
        return GmmModel(mu, global_var[None, :].copy(), np.ones(1), [ll], True)

    model = GmmModel(
        means=_kmeanspp_centers(x, n_components, rng),
        variances=np.tile(global_var, (n_components, 1)),
        weights=np.full(n_components, 1.0 / n_components),
        loglik_trace=[], converged=False,
    )

    prev = -np.inf
    for _ in range(max_iter):
        resp, loglik = model.responsibilities(x)
        model.loglik_trace.append(loglik)
        nk = resp.sum(axis=0) + 1e-12
        model.weights = nk / n
        model.means = (resp.T @ x) / nk[:, None]
        sq = (resp.T @ (x ** 2)) / nk[:, None]
        model.variances = np.maximum(sq - model.means ** 2, var_floor)
        if abs(loglik - prev) / n < tol:
            model.converged = True
            break
        prev = loglik
    if not model.converged:
        raise FittingError(
            f"EM did not converge within {max_iter} iterations "
            f"(last mean-loglik change {(model.loglik_trace[-1] - prev) / n:.3e})",
            loglik_trace=model.loglik_trace)
    return model
