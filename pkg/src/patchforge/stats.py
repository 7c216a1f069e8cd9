"""Paired-sample t-test with a quadrature-based p-value."""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from .errors import DegenerateVarianceError, InvalidParameterError


def t_density(x, df):
    """Student-t probability density with ``df`` degrees of freedom."""
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def two_sided_p(t, df, epsabs=1e-10):
    """P(|T| >= |t|) = 1 - 2 * integral_0^|t| f(x) dx, by adaptive quadrature."""
    t = abs(float(t))
    if t == 0:
        return 1.0
    if math.isinf(t):
        return 0.0
    central, err = integrate.quad(t_density, 0.0, t, args=(df,), epsabs=epsabs, epsrel=1e-12, limit=200)
    if err > 1e-6:
        tail, err = integrate.quad(t_density, t, np.inf, args=(df,), epsabs=epsabs, limit=200)
        return float(min(max(2.0 * tail, 0.0), 1.0))
    return float(min(max(1.0 - 2.0 * central, 0.0), 1.0))


def paired_t_test(a, b):
    """Paired t-test of ``a`` against ``b``.

    Returns ``(t, p)`` with ``t = mean(d) / (sd(d) / sqrt(n))`` on
    ``d = a - b`` (sample standard deviation) and the two-sided p-value for
    ``n - 1`` degrees of freedom.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidParameterError("paired samples must be 1-d sequences of equal length")
    n = len(a)
    if n < 2:
        raise InvalidParameterError("need at least two pairs")
    d = a - b
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        raise DegenerateVarianceError("all paired differences are equal and nonzero")
    t = mean / (sd / math.sqrt(n))
    return t, two_sided_p(t, n - 1)
