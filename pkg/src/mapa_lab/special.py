"""Gaussian special functions and stable reductions (plain numpy, float64)."""

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError

LOG_2PI = float(np.log(2.0 * np.pi))


def log_sum_exp(v):
    """Overflow-safe log(sum(exp(v))) of a non-empty vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty vector")
    m = v.max()
    if not np.isfinite(m):
        m = 0.0
    return float(m + np.log(np.sum(np.exp(v - m))))


def std_normal_cdf(z):
    """Standard normal CDF, elementwise."""
    return ndtr(np.asarray(z, dtype=np.float64))


def std_normal_inv_cdf(u):
    """Inverse standard normal CDF on the open interval (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise DomainError("inverse normal CDF requires u in (0, 1)")
    return ndtri(u)


def gaussian_logpdf(x, mean, var):
    """Univariate Gaussian log density, elementwise over broadcast inputs."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0.0):
        raise DomainError("gaussian_logpdf requires var > 0")
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)
