"""LOWESS: locally weighted linear regression with robustness iterations."""

import numpy as np


def _tricube(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u**3) ** 3


def _bisquare(u):
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u**2) ** 2


def lowess(x, y, span=2.0 / 3.0, iterations=3):
    """Cleveland's robust locally weighted regression.

    Parameters
    ----------
    x, y : array_like, shape (n,)
        Data, n >= 5.
    span : float
        Fraction of points in each local neighbourhood.
    iterations : int
        Number of bisquare robustness reweightings after the initial fit.

    Returns
    -------
    xs : ndarray
        ``x`` sorted ascending.
    fitted : ndarray
        Smoothed values at ``xs``.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = x.size
    if y.size != n:
        raise ValueError("x and y differ in length")
    if n < 5:
        raise ValueError("lowess needs at least 5 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    if np.ptp(x) == 0:
        raise ValueError("lowess is undefined when all x are equal")
    if not 0 < span <= 1:
        raise ValueError("span must be in (0, 1]")

    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    r = min(n, max(2, int(np.ceil(span * n - 1e-10))))

    robust = np.ones(n)
    fitted = np.empty(n)
    for it in range(iterations + 1):
        for lo in range(0, n, _BLOCK):
            rows = slice(lo, min(n, lo + _BLOCK))
            fitted[rows] = _local_fit(xs, ys, xs[rows], r, robust)
        if it == iterations:
            break
        resid = ys - fitted
        s = np.median(np.abs(resid))
        if s <= 1e-12 * max(1.0, np.max(np.abs(ys))):
            break
        robust = _bisquare(resid / (6.0 * s))
    return xs, fitted


_BLOCK = 256


def _local_fit(xs, ys, x0, r, robust):
    dist = np.abs(x0[:, None] - xs[None, :])
    h = np.partition(dist, r - 1, axis=1)[:, r - 1]
    # widen slightly so the r-th neighbour keeps a small positive weight
    h = np.where(h > 0, h * 1.000001, 1.0)
    w = _tricube(dist / h[:, None]) * robust[None, :]
    sw = w.sum(axis=1)
    xm = (w @ xs) / sw
    ym = (w @ ys) / sw
    dx = xs[None, :] - xm[:, None]
    sxx = np.sum(w * dx**2, axis=1)
    sxy = np.sum(w * dx * (ys[None, :] - ym[:, None]), axis=1)
    flat = sxx <= 1e-12 * np.maximum(np.sum(w * dx**2 + w * xm[:, None] ** 2, axis=1), 1e-300)
    slope = np.where(flat, 0.0, sxy / np.where(flat, 1.0, sxx))
    return ym + slope * (x0 - xm)
