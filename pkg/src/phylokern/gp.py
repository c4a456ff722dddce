"""Gaussian-process host-trait models on precomputed kernel matrices.

Regression is exact: the training objective is the log-marginal likelihood
of ``y ~ N(0, s2 * K + tau2 * I)``. Binary traits use a probit likelihood with
a full-rank Gaussian variational posterior fitted by maximising the ELBO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.special import log_ndtr, ndtr

from phylokern.errors import DataValidationError, NumericalError
from phylokern.seqkernel import VARIANT_ORDER, KmerConfig

LOG_2PI = math.log(2 * math.pi)
JITTER_LADDER = tuple(10.0**e for e in range(-10, -3))  # 1e-10 ... 1e-4
HYPER_BOUNDS = (1e-6, 1e6)
GRID_SIZE = 9
GH_NODES = 32


def _kernel_scale(K: np.ndarray) -> float:
    s = float(np.mean(np.abs(np.diag(K)))) if K.size else 0.0
    return s if s > 0 else 1.0


def cholesky_with_jitter(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M``, adding ``j * mean(diag M) * I`` if needed.

    Tries no jitter first, then 1e-10, 1e-9, ... 1e-4. Returns the factor
    and the absolute jitter that was added.
    """
    M = np.asarray(M, dtype=np.float64)
    scale = _kernel_scale(M)
    for rel in (0.0, *JITTER_LADDER):
        jitter = rel * scale
        try:
            L = linalg.cholesky(M + jitter * np.eye(len(M)), lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        return L, jitter
    raise NumericalError("matrix is not positive definite even with jitter 1e-4")


# -------------------------------------------------------------- regression

def lml(K: np.ndarray, y: np.ndarray, noise_var: float, signal_var: float = 1.0) -> float:
    """``log N(y | 0, signal_var * K + noise_var * I)``."""
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if noise_var <= 0 or signal_var <= 0:
        raise ValueError("noise and signal variances must be positive")
    n = len(y)
    L, _ = cholesky_with_jitter(signal_var * K + noise_var * np.eye(n))
    a = linalg.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI)


def lml_grad(K: np.ndarray, y: np.ndarray, noise_var: float,
             signal_var: float = 1.0) -> tuple[float, np.ndarray]:
    """LML and its gradient with respect to ``(log noise_var, log signal_var)``."""
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    L, _ = cholesky_with_jitter(signal_var * K + noise_var * np.eye(n))
    alpha = linalg.cho_solve((L, True), y)
    Minv = linalg.cho_solve((L, True), np.eye(n))
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    d_noise = 0.5 * noise_var * (alpha @ alpha - np.trace(Minv))
    d_signal = 0.5 * signal_var * (alpha @ K @ alpha - np.sum(Minv * K))
    return float(value), np.array([d_noise, d_signal])


class _EigenLml:
    """LML over (log tau2, log s2) in the eigenbasis of a fixed K: O(n) per call."""

    def __init__(self, K: np.ndarray, y: np.ndarray):
        lam, Q = np.linalg.eigh(K)
        self.lam = np.clip(lam, 0.0, None)
        self.proj2 = (Q.T @ y) ** 2
        self.n = len(y)

    def __call__(self, log_noise: float, log_signal: float) -> tuple[float, np.ndarray]:
        tau2, s2 = math.exp(log_noise), math.exp(log_signal)
        d = s2 * self.lam + tau2
        ratio = self.proj2 / d**2 - 1.0 / d
        value = -0.5 * np.sum(self.proj2 / d) - 0.5 * np.sum(np.log(d)) - 0.5 * self.n * LOG_2PI
        grad = 0.5 * np.array([tau2 * ratio.sum(), s2 * (self.lam * ratio).sum()])
        return float(value), grad


@dataclass(frozen=True, eq=False)
class GpRegressor:
    K: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    noise_var: float
    signal_var: float
    lml: float
    jitter: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @classmethod
    def from_hyperparameters(cls, K, y, noise_var: float, signal_var: float) -> "GpRegressor":
        K = np.asarray(K, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if noise_var <= 0 or signal_var <= 0:
            raise ValueError("noise and signal variances must be positive")
        n = len(y)
        L, jitter = cholesky_with_jitter(signal_var * K + noise_var * np.eye(n))
        alpha = linalg.cho_solve((L, True), y)
        value = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI)
        return cls(K, y, float(noise_var), float(signal_var), value, jitter, L, alpha)

    def summary(self) -> dict:
        return {"task": "regression", "objective": self.lml, "noise_var": self.noise_var,
                "signal_var": self.signal_var, "jitter": self.jitter, "n_train": len(self.y)}


def fit_regression(K: np.ndarray, y: np.ndarray, bounds: tuple[float, float] = HYPER_BOUNDS,
                   grid_size: int = GRID_SIZE) -> GpRegressor:
    """Maximise the LML over noise and signal variance.

    A log-spaced grid over ``bounds`` seeds an L-BFGS-B polish. The noise
    bounds are absolute; the signal bounds apply to ``s2 * mean(diag K)`` so
    that rescaling K does not move the optimum.
    """
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if K.shape != (len(y), len(y)):
        raise DataValidationError("kernel and targets have inconsistent sizes")
    if len(y) < 2:
        raise DataValidationError("need at least two training points")
    scale = _kernel_scale(K)
    objective = _EigenLml(K, y)
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    box = [(lo, hi), (lo - math.log(scale), hi - math.log(scale))]

    grid = np.linspace(0.0, 1.0, grid_size)
    best, best_x = -np.inf, None
    for u in grid:
        for v in grid:
            x = (box[0][0] + u * (hi - lo), box[1][0] + v * (hi - lo))
            val, _ = objective(*x)
            if np.isfinite(val) and val > best:
                best, best_x = val, x
    if best_x is None:
        raise NumericalError("LML is non-finite on the whole hyperparameter grid")

    def neg(x):
        val, g = objective(*x)
        return -val, -g

    res = optimize.minimize(neg, np.array(best_x), jac=True, method="L-BFGS-B", bounds=box)
    x = res.x if np.isfinite(res.fun) and -res.fun >= best else np.array(best_x)
    return GpRegressor.from_hyperparameters(K, y, math.exp(x[0]), math.exp(x[1]))


def predict_regression(model: GpRegressor, K_cross: np.ndarray,
                       K_test_diag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of noisy targets at test points."""
    K_cross = np.atleast_2d(np.asarray(K_cross, dtype=np.float64))
    K_test_diag = np.asarray(K_test_diag, dtype=np.float64).ravel()
    if K_cross.shape[1] != len(model.y) or K_cross.shape[0] != len(K_test_diag):
        raise DataValidationError("cross-kernel dimensions do not match the model")
    s2 = model.signal_var
    mean = s2 * K_cross @ model.alpha
    V = linalg.solve_triangular(model.chol, s2 * K_cross.T, lower=True)
    var = s2 * K_test_diag - np.sum(V * V, axis=0) + model.noise_var
    return mean, var


def log_normal_density(y, mean, var) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise NumericalError("predictive variance must be positive")
    return -0.5 * (LOG_2PI + np.log(var) + (np.asarray(y) - mean) ** 2 / var)


def lpd_regression(model: GpRegressor, K_cross, K_test_diag, y_test) -> float:
    """Mean log predictive density of held-out targets."""
    mean, var = predict_regression(model, K_cross, K_test_diag)
    return float(np.mean(log_normal_density(np.asarray(y_test, float), mean, var)))


# ---------------------------------------------------------- classification

_GH_X, _GH_W = np.polynomial.hermite.hermgauss(GH_NODES)


def _probit_terms(y: np.ndarray, mu: np.ndarray, var: np.ndarray):
    """Per-point E[log Phi(y f)], dE/dmu and dE/dvar under f ~ N(mu, var)."""
    sd = np.sqrt(2.0 * np.maximum(var, 0.0))
    f = mu[:, None] + sd[:, None] * _GH_X[None, :]
    t = y[:, None] * f
    logcdf = log_ndtr(t)
    # inverse Mills ratio phi(t) / Phi(t), computed in log space
    lam = np.exp(-0.5 * t**2 - 0.5 * LOG_2PI - logcdf)
    w = _GH_W / math.sqrt(math.pi)
    value = logcdf @ w
    d_mu = (y[:, None] * lam) @ w
    d_var = 0.5 * (-lam * (t + lam)) @ w
    return value, d_mu, d_var


def expected_log_probit(mu, var, y=1.0) -> np.ndarray:
    """Gauss-Hermite estimate of ``E[log Phi(y f)]`` for ``f ~ N(mu, var)``."""
    mu, var, y = np.broadcast_arrays(np.atleast_1d(np.asarray(mu, float)),
                                     np.atleast_1d(np.asarray(var, float)),
                                     np.atleast_1d(np.asarray(y, float)))
    return _probit_terms(y, mu, var)[0]


def _signed_labels(y) -> np.ndarray:
    y = np.asarray(y)
    values = set(np.unique(y).tolist())
    if values <= {0, 1}:
        return np.where(y == 1, 1.0, -1.0)
    if values <= {-1, 1}:
        return y.astype(np.float64)
    raise DataValidationError(f"binary labels must be 0/1 or -1/+1, found {sorted(values)}")


def elbo(K: np.ndarray, y, mu: np.ndarray, Sigma: np.ndarray) -> float:
    """``E_q[log p(y | f)] - KL(q || p)`` with ``q = N(mu, Sigma)``, ``p = N(0, K)``."""
    K = np.asarray(K, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    y = _signed_labels(y)
    n = len(y)
    if not np.allclose(Sigma, Sigma.T):
        raise DataValidationError("variational covariance must be symmetric")
    if np.linalg.eigvalsh(Sigma).min() < -1e-12 * max(1.0, np.abs(Sigma).max()):
        raise DataValidationError("variational covariance is not positive semi-definite")
    LK, _ = cholesky_with_jitter(K)
    LS, _ = cholesky_with_jitter(Sigma)
    A = linalg.solve_triangular(LK, LS, lower=True)
    b = linalg.solve_triangular(LK, mu, lower=True)
    kl = 0.5 * (np.sum(A * A) + b @ b - n
                + 2 * np.log(np.diag(LK)).sum() - 2 * np.log(np.diag(LS)).sum())
    ell, _, _ = _probit_terms(y, mu, np.diag(Sigma).copy())
    return float(ell.sum() - kl)


@dataclass(frozen=True, eq=False)
class GpClassifier:
    """Whitened variational posterior.

    With ``L`` the Cholesky factor of ``K / kernel_scale``, the latent values
    are ``f = sqrt(signal_var * kernel_scale) L v`` with ``v ~ N(m, C C^T)``.
    """

    K: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    signal_var: float
    kernel_scale: float
    chol_K: np.ndarray = field(repr=False)
    whitened_mean: np.ndarray = field(repr=False)
    whitened_factor: np.ndarray = field(repr=False)
    elbo_trace: tuple[float, ...]
    jitter: float

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]

    @property
    def _amplitude(self) -> float:
        return math.sqrt(self.signal_var * self.kernel_scale)

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular ``F`` with ``Sigma = F F^T``."""
        return self._amplitude * self.chol_K @ self.whitened_factor

    @property
    def mean(self) -> np.ndarray:
        return self._amplitude * self.chol_K @ self.whitened_mean

    @property
    def cov(self) -> np.ndarray:
        F = self.factor
        return F @ F.T

    def summary(self) -> dict:
        return {"task": "classification", "objective": self.elbo, "signal_var": self.signal_var,
                "jitter": self.jitter, "n_train": len(self.y),
                "n_accepted_steps": len(self.elbo_trace) - 1}


def _unpack(theta: np.ndarray, n: int, tril: tuple[np.ndarray, np.ndarray]):
    m = theta[:n]
    C = np.zeros((n, n))
    C[tril] = theta[n:-1]
    diag = np.diag_indices(n)
    C[diag] = np.exp(C[diag])
    return m, C, theta[-1]


def fit_classifier(K: np.ndarray, y, signal_bounds: tuple[float, float] = HYPER_BOUNDS,
                   max_iter: int = 500, tol: float = 1e-9) -> GpClassifier:
    """Maximise the ELBO over the variational mean, a lower-triangular factor
    of the covariance and the kernel amplitude, with L-BFGS-B.

    Only iterates that raise the ELBO are recorded in ``elbo_trace``.
    """
    K = np.asarray(K, dtype=np.float64)
    y = _signed_labels(y)
    n = len(y)
    if K.shape != (n, n):
        raise DataValidationError("kernel and labels have inconsistent sizes")
    if n < 2:
        raise DataValidationError("need at least two training points")
    scale = _kernel_scale(K)
    LK, jitter = cholesky_with_jitter(K / scale)
    tril = np.tril_indices(n)
    diag_pos = np.flatnonzero(tril[0] == tril[1])

    def neg_elbo(theta):
        m, C, log_s2 = _unpack(theta, n, tril)
        s = math.exp(0.5 * log_s2)
        B = s * (LK @ C)
        mu = s * (LK @ m)
        var = np.sum(B * B, axis=1)
        ell, d_mu, d_var = _probit_terms(y, mu, var)
        logdiag = np.log(np.diag(C))
        kl = 0.5 * (np.sum(C * C) + m @ m - n) - logdiag.sum()
        value = ell.sum() - kl
        if not np.isfinite(value):
            return np.inf, np.zeros_like(theta)
        g_m = s * (LK.T @ d_mu) - m
        g_C = np.tril(s * (LK.T @ (2 * d_var[:, None] * B))) - C
        g_C[np.diag_indices(n)] += 1.0 / np.diag(C)
        g_tri = g_C[tril]
        g_tri[diag_pos] *= np.diag(C)
        g_s = 0.5 * (d_mu @ mu) + (d_var @ var)
        return -value, -np.concatenate([g_m, g_tri, [g_s]])

    theta0 = np.zeros(n + len(tril[0]) + 1)
    theta0[-1] = 0.0  # s2 * scale = 1: unit-diagonal prior
    f0, _ = neg_elbo(theta0)
    if not np.isfinite(f0):
        raise NumericalError("ELBO is not finite at the prior")
    trace = [-f0]

    def record(xk):
        val, _ = neg_elbo(xk)
        if np.isfinite(val) and -val > trace[-1]:
            trace.append(-val)

    lo, hi = signal_bounds
    bounds = [(None, None)] * (len(theta0) - 1) + [(math.log(lo), math.log(hi))]
    res = optimize.minimize(neg_elbo, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                            callback=record, options={"maxiter": max_iter, "ftol": tol})
    theta = res.x
    final, _ = neg_elbo(theta)
    if not np.isfinite(final) or -final < trace[0]:
        theta = theta0
    elif -final > trace[-1]:
        trace.append(-final)
    m, C, log_s2 = _unpack(theta, n, tril)
    return GpClassifier(K, y, math.exp(log_s2) / scale, scale, LK, m, C,
                        tuple(float(t) for t in trace), jitter * scale)


def _latent_predictive(clf: GpClassifier, K_cross, K_test_diag):
    K_cross = np.atleast_2d(np.asarray(K_cross, dtype=np.float64))
    K_test_diag = np.asarray(K_test_diag, dtype=np.float64).ravel()
    if K_cross.shape[1] != len(clf.y) or K_cross.shape[0] != len(K_test_diag):
        raise DataValidationError("cross-kernel dimensions do not match the model")
    scale = clf.kernel_scale
    s2 = clf.signal_var * scale  # amplitude on the unit-scaled kernel
    A = linalg.solve_triangular(clf.chol_K, K_cross.T / scale, lower=True)
    mean = math.sqrt(s2) * (A.T @ clf.whitened_mean)
    CA = clf.whitened_factor.T @ A
    var = s2 * (K_test_diag / scale - np.sum(A * A, axis=0) + np.sum(CA * CA, axis=0))
    return mean, np.maximum(var, 0.0)


def predict_proba(clf: GpClassifier, K_cross, K_test_diag) -> np.ndarray:
    """``P(y = 1) = Phi(m / sqrt(1 + v))`` under the latent predictive ``N(m, v)``."""
    mean, var = _latent_predictive(clf, K_cross, K_test_diag)
    return ndtr(mean / np.sqrt(1.0 + var))


def lpd_classification(clf: GpClassifier, K_cross, K_test_diag, y_test) -> float:
    mean, var = _latent_predictive(clf, K_cross, K_test_diag)
    y = _signed_labels(y_test)
    return float(np.mean(log_ndtr(y * mean / np.sqrt(1.0 + var))))


# ---------------------------------------------------------- model choice

@dataclass(frozen=True)
class ModelScore:
    model_id: str
    objective: float
    held_out_lpd: Optional[float] = None
    config: Optional[KmerConfig] = None
    hyperparameters: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.objective):
            raise ValueError(f"objective for {self.model_id!r} is not finite")

    def sort_key(self):
        if self.config is None:
            return (-self.objective, math.inf, len(VARIANT_ORDER), 0, 0, self.model_id)
        cfg = self.config
        return (-self.objective, cfg.k, VARIANT_ORDER[cfg.variant], cfg.m, cfg.g, self.model_id)


def model_select(candidates: Sequence[ModelScore]) -> list[ModelScore]:
    """Rank by training objective (higher first); ties go to smaller k, then
    spectrum before gappy pair before mismatch."""
    if not candidates:
        raise ValueError("no candidate models")
    return sorted(candidates, key=ModelScore.sort_key)
