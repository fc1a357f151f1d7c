"""Regularized linear classifiers: logistic regression and hinge-loss SVM.

Objective, with labels mapped to +/-1 and the intercept unpenalized::

    penalty(w) + C * sum_a loss(y_a * (w . x_a + b))

penalty is ``0.5 * ||w||^2`` (L2) or ``||w||_1`` (L1). L2 problems go to
L-BFGS; L1 problems use accelerated proximal gradient with soft-thresholding.
The hinge loss is not differentiable, so the optimizers work on a Huber-ized
hinge whose smoothing width shrinks towards zero (warm-started); reported
objective values always use the exact hinge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.special import expit

LOSSES = ("log", "hinge")
PENALTIES = ("l1", "l2")
HINGE_SMOOTHING = (1.0, 0.1, 0.01, 0.001)


@dataclass
class LinearFit:
    weights: np.ndarray
    intercept: float
    objective: float
    n_iter: int
    converged: bool


def _signed(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.where(y > 0, 1.0, -1.0)


def _loss_and_dmargin(margins: np.ndarray, loss: str, mu: float = 0.0):
    """Summed loss over margins and d(loss)/d(margin) per row."""
    if loss == "log":
        value = np.logaddexp(0.0, -margins).sum()
        return value, -expit(-margins)
    if loss != "hinge":
        raise ValueError(f"unknown loss {loss!r}")
    gap = 1.0 - margins
    if mu <= 0:
        value = np.maximum(gap, 0.0).sum()
        return value, np.where(gap > 0, -1.0, 0.0)
    quad = (gap > 0) & (gap < mu)
    lin = gap >= mu
    value = (gap[quad] ** 2).sum() / (2 * mu) + (gap[lin] - mu / 2).sum()
    d = np.zeros_like(margins)
    d[quad] = -gap[quad] / mu
    d[lin] = -1.0
    return value, d


def _smooth_part(w, b, X, ys, loss, C, mu=0.0, XT=None):
    z = X @ w + b
    m = ys * z
    value, dm = _loss_and_dmargin(m, loss, mu)
    coef = dm * ys
    gw = (X.T if XT is None else XT) @ coef
    gw = np.asarray(gw).ravel()
    return C * value, C * gw, C * coef.sum()


def loss_gradient(w, b, X, y, cfg=None, *, loss: str | None = None,
                  penalty: str | None = None, C: float | None = None):
    """Objective value and gradient at ``(w, b)``.

    ``y`` holds 0/1 labels. The returned gradient stacks ``d/dw`` and
    ``d/db`` into one vector of length ``len(w) + 1``. With the L1 penalty
    only the data term is differentiated (the penalty is handled by the
    proximal step), while the value still includes ``||w||_1``. For the hinge
    loss a subgradient is returned.
    """
    if cfg is not None:
        loss = loss or cfg.loss
        penalty = penalty or cfg.penalty.value
        C = cfg.C if C is None else C
    loss = loss or "log"
    penalty = (penalty or "l2").lower()
    C = 1.0 if C is None else C
    w = np.asarray(w, dtype=float)
    value, gw, gb = _smooth_part(w, float(b), X, _signed(y), loss, C)
    if penalty == "l2":
        value += 0.5 * w @ w
        gw = gw + w
    elif penalty == "l1":
        value += np.abs(w).sum()
    else:
        raise ValueError(f"unknown penalty {penalty!r}")
    return value, np.append(gw, gb)


def objective(w, b, X, y, loss: str, penalty: str, C: float) -> float:
    return loss_gradient(w, b, X, y, loss=loss, penalty=penalty, C=C)[0]


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _fit_l2(X, ys, loss, C, max_iters, tol, x0):
    d = X.shape[1]
    mus = HINGE_SMOOTHING if loss == "hinge" else (0.0,)
    x = x0.copy()
    n_iter, converged = 0, True
    XT = X.T.tocsr()

    for mu in mus:
        def fun(v):
            w, b = v[:d], v[d]
            val, gw, gb = _smooth_part(w, b, X, ys, loss, C, mu, XT)
            return val + 0.5 * w @ w, np.append(gw + w, gb)

        res = scipy.optimize.minimize(
            fun, x, jac=True, method="L-BFGS-B",
            options={"maxiter": max_iters, "gtol": tol, "ftol": 1e-12})
        x = res.x
        n_iter += int(res.nit)
        converged = converged and (res.success or res.nit < max_iters)
    return x, n_iter, converged


def _fit_l1(X, ys, loss, C, max_iters, tol, x0):
    """FISTA with backtracking and a monotone safeguard (best iterate kept)."""
    d = X.shape[1]
    mus = HINGE_SMOOTHING if loss == "hinge" else (0.0,)
    x = x0.copy()
    n_iter, converged = 0, False
    XT = X.T.tocsr()

    for mu in mus:
        def smooth(v):
            val, gw, gb = _smooth_part(v[:d], v[d], X, ys, loss, C, mu, XT)
            return val, np.append(gw, gb)

        def full(v, fv):
            return fv + np.abs(v[:d]).sum()

        def prox(v, step):
            out = v.copy()
            out[:d] = soft_threshold(v[:d], step)
            return out

        L = 1.0
        y_ = x.copy()
        t = 1.0
        fx, _ = smooth(x)
        best, best_obj = x.copy(), full(x, fx)
        converged = False
        for _ in range(max_iters):
            n_iter += 1
            fy, gy = smooth(y_)
            while True:
                step = 1.0 / L
                cand = prox(y_ - step * gy, step)
                fc, _ = smooth(cand)
                diff = cand - y_
                if fc <= fy + gy @ diff + 0.5 * L * (diff @ diff) + 1e-12 * abs(fy):
                    break
                L *= 2.0
            obj = full(cand, fc)
            if obj > best_obj:
                # restart momentum from the best point
                t = 1.0
                y_ = best.copy()
                x = best.copy()
                L *= 2.0
                continue
            delta = np.linalg.norm(cand - x)
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            y_ = cand + ((t - 1.0) / t_next) * (cand - x)
            x, t = cand, t_next
            best, best_obj = x.copy(), obj
            L *= 0.9
            if delta <= tol * max(1.0, np.linalg.norm(x)):
                converged = True
                break
        x = best
    return x, n_iter, converged


def fit_linear(X, y, loss: str = "log", penalty: str = "l2", C: float = 1.0,
               max_iters: int = 1000, tol: float = 1e-6) -> LinearFit:
    """Fit one binary linear classifier on 0/1 labels ``y``."""
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if penalty not in PENALTIES:
        raise ValueError(f"unknown penalty {penalty!r}")
    if C <= 0:
        raise ValueError("C must be positive")
    X = sp.csr_matrix(X, dtype=np.float64)
    ys = _signed(y)
    d = X.shape[1]
    x0 = np.zeros(d + 1)
    if penalty == "l2":
        x, n_iter, converged = _fit_l2(X, ys, loss, C, max_iters, tol, x0)
    else:
        x, n_iter, converged = _fit_l1(X, ys, loss, C, max_iters, tol, x0)
    w, b = x[:d], float(x[d])
    obj = objective(w, b, X, y, loss, penalty, C)
    start = objective(np.zeros(d), 0.0, X, y, loss, penalty, C)
    if obj > start:
        # never worse than the zero model; convexity makes this a safe fallback
        w, b, obj = np.zeros(d), 0.0, start
    return LinearFit(w, b, float(obj), n_iter, converged)


def decision_function(X, w, b) -> np.ndarray:
    return np.asarray(X @ w).ravel() + b
