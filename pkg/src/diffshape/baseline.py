"""Euclidean baselines: PLS1 regression on aligned vertex coordinates."""
from dataclasses import dataclass

import numpy as np

from .errors import DesignError
from .stats import LOOCVResult


@dataclass(frozen=True, eq=False)
class PLSModel:
    x_mean: np.ndarray
    y_mean: float
    weights: np.ndarray      # (k, d), unit rows
    loadings: np.ndarray     # (k, d)
    y_loadings: np.ndarray   # (k,)
    coef: np.ndarray         # (d,)

    @property
    def n_components(self):
        return len(self.y_loadings)


def pls_fit(X, y, n_components=1, tol=1e-12, max_iter=500):
    """PLS1 by NIPALS on centered (unscaled) data, deflating X only."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise DesignError("X must be (n, d) with one target per row")
    n, d = X.shape
    if n < 2:
        raise DesignError("PLS needs at least two samples")
    if not 1 <= n_components <= min(n - 1, d):
        raise DesignError(f"n_components must lie in [1, {min(n - 1, d)}]")
    x_mean, y_mean = X.mean(axis=0), float(y.mean())
    Xk = X - x_mean
    yc = y - y_mean
    if not np.any(Xk) or np.allclose(yc, 0, atol=0):
        raise DesignError("zero variance in X or y")
    scale = np.linalg.norm(Xk)
    W, P, Q = [], [], []
    for _ in range(n_components):
        u = yc
        w = None
        for _ in range(max_iter):
            w_new = Xk.T @ u
            nw = np.linalg.norm(w_new)
            if nw <= 1e-12 * scale * np.linalg.norm(yc):
                raise DesignError("X has too low rank for the requested components")
            w_new /= nw
            t = Xk @ w_new
            qk = yc @ t / (t @ t)
            u = yc * qk / (qk * qk)
            if w is not None and np.linalg.norm(w_new - w) <= tol:
                w = w_new
                break
            w = w_new
        t = Xk @ w
        tt = t @ t
        p = Xk.T @ t / tt
        W.append(w)
        P.append(p)
        Q.append(yc @ t / tt)
        Xk = Xk - np.outer(t, p)
    W, P, Q = np.array(W), np.array(P), np.array(Q)
    coef = W.T @ np.linalg.solve(P @ W.T, Q)
    return PLSModel(x_mean, y_mean, W, P, Q, coef)


def pls_predict(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(model.x_mean):
        raise DesignError(f"expected {len(model.x_mean)} features, got {x.shape[-1]}")
    out = model.y_mean + (x - model.x_mean) @ model.coef
    return float(out) if np.ndim(out) == 0 else out


def pls_loocv(X, y, ids=None, n_components=1):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 3:
        raise DesignError("leave-one-out needs at least three samples")
    preds = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        preds[i] = pls_predict(pls_fit(X[keep], y[keep], n_components), X[i])
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    return LOOCVResult(ids, y.copy(), preds, np.abs(preds - y))


def compare_report(intrinsic, pls, n_components=1):
    """Per-sample and summary comparison of two sets of absolute errors.

    ``difference`` is the PLS value minus the intrinsic value.
    """
    if list(intrinsic.ids) != list(pls.ids):
        raise DesignError("intrinsic and PLS results cover different samples")
    a = np.asarray(intrinsic.errors, dtype=float)
    b = np.asarray(pls.errors, dtype=float)

    def summary(fn):
        va, vb = fn(a), fn(b)
        return {"intrinsic": va, "pls": vb, "difference": vb - va}

    return {
        "samples": [{"id": i, "intrinsic_error_deg": float(x), "pls_error_deg": float(y)}
                    for i, x, y in zip(intrinsic.ids, a, b)],
        "mae": summary(lambda e: float(np.mean(e))),
        "std_n": summary(lambda e: float(np.std(e))),
        "std_n_minus_1": summary(lambda e: float(np.std(e, ddof=1)) if len(e) > 1 else 0.0),
        "metadata": {"pls_feature_scaling": False, "pls_n_components": n_components},
    }


def comparison_table(record):
    """CSV text (id, intrinsic, pls) for a per-sample bar chart."""
    lines = ["id,intrinsic_error_deg,pls_error_deg"]
    lines += [f"{s['id']},{s['intrinsic_error_deg']!r},{s['pls_error_deg']!r}"
              for s in record["samples"]]
    return "\n".join(lines) + "\n"
