"""Small statistics helpers: Wilson score intervals and log-log slope fits."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from .errors import PreconditionError


def wilson_ci(hits, n, level=0.95):
    """Wilson score interval for a binomial proportion; always contains hits/n."""
    if n < 1:
        raise PreconditionError("wilson_ci needs n >= 1")
    if not 0 <= hits <= n:
        raise PreconditionError("need 0 <= hits <= n")
    z = float(ndtri(0.5 + level / 2.0))
    phat = hits / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def loglog_slope(points):
    """Least-squares slope of ln p against ln r, with its standard error.

    `points` is an iterable of (r, p) with r, p > 0; needs at least 3 points.
    """
    pts = [(float(r), float(p)) for r, p in points]
    if len(pts) < 3:
        raise PreconditionError("loglog_slope needs >= 3 points")
    if any(r <= 0 or p <= 0 for r, p in pts):
        raise PreconditionError("loglog_slope needs positive r and p")
    x = np.log([r for r, _ in pts])
    y = np.log([p for _, p in pts])
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    dof = len(pts) - 2
    se = float(np.sqrt(np.sum(resid**2) / dof / sxx)) if dof > 0 else 0.0
    return slope, se
