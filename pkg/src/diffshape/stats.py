"""Intrinsic statistics on manifolds from :mod:`diffshape.manifold`.

Geodesic regression decouples over the factors of a product manifold.  Flat
factors (Euclidean space, SPD in the log chart) are fitted by ordinary least
squares in their chart.  Curved element-wise factors (SO(3), S^2) are fitted
by Riemannian gradient descent with Armijo backtracking, vectorised over
elements: the objective is a sum over elements, so every element (mesh face)
is an independent small problem that is advanced in lock-step.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DesignError, ExtrapolationError, ShapeError
from .manifold import Product

logger = logging.getLogger(__name__)

#: Extrapolation allowed beyond the fitted interval, in interval lengths.
DEFAULT_CAP = 3.0

_INVPHI = (np.sqrt(5.0) - 1) / 2


@dataclass(frozen=True)
class LabeledSample:
    shape: object
    param: float
    group: str = ""
    id: str = ""


@dataclass(frozen=True, eq=False)
class GeodesicSegment:
    """Geodesic through ``p`` (at ``t_min``) and ``q`` (at ``t_max``).

    Parameters are in data units (e.g. degrees latitude).  Evaluation is
    allowed up to ``cap`` interval lengths outside ``[t_min, t_max]``.
    """

    manifold: object
    p: object
    q: object
    t_min: float
    t_max: float
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise DesignError("segment interval must satisfy t_min < t_max")

    @property
    def span(self):
        return self.t_max - self.t_min

    def normalized(self, t):
        return (t - self.t_min) / self.span

    def search_interval(self):
        return (self.t_min - self.cap * self.span, self.t_max + self.cap * self.span)

    def evaluate(self, t):
        s = self.normalized(t)
        if not np.isfinite(s) or s < -self.cap or s > 1 + self.cap:
            raise ExtrapolationError(
                f"parameter {t!r} lies beyond the extrapolation cap "
                f"({self.cap:g} interval lengths around "
                f"[{self.t_min!r}, {self.t_max!r}])")
        if s == 0:
            return self.p
        if s == 1:
            return self.q
        return self.manifold.geodesic_point(self.p, self.q, s)

    def velocity(self, t):
        """Tangent of the curve at ``evaluate(t)`` per unit parameter."""
        g = self.evaluate(t)
        v = self.manifold.geodesic_velocity(self.p, self.q, self.normalized(t))
        return g, self.manifold.scale(v, 1.0 / self.span)

    @property
    def length(self):
        return self.manifold.distance(self.p, self.q)


@dataclass(eq=False)
class RegressionReport:
    segment: GeodesicSegment
    sse: float
    distances: np.ndarray
    residuals: list
    converged: bool = True
    grad_norm: float = 0.0
    iterations: int = 0


@dataclass(eq=False)
class LOOCVResult:
    ids: list
    params: np.ndarray
    predictions: np.ndarray
    errors: np.ndarray
    search_intervals: list = field(default_factory=list)

    @property
    def mae(self):
        return float(np.mean(self.errors))

    @property
    def std(self):
        """Population standard deviation (divisor n) of the absolute errors."""
        return float(np.std(self.errors))

    @property
    def std_n_minus_1(self):
        return float(np.std(self.errors, ddof=1))


class SampleError(ShapeError):
    """Wraps an error raised while processing one sample."""

    def __init__(self, sample_id, cause):
        super().__init__(f"sample {sample_id!r}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


def evaluate(segment, t):
    return segment.evaluate(t)


def frechet_mean(manifold, points, tol=1e-9, max_iter=500):
    """Fréchet mean by the fixed-point iteration ``p <- exp_p(mean log_p q_i)``.

    Starts from the first point and stops once the update norm is at most
    ``tol * (1 + spread)`` where spread is the largest distance of the data
    to the first point.
    """
    points = list(points)
    if not points:
        raise ValueError("frechet_mean of an empty set")
    M = manifold
    p = points[0]
    n = len(points)
    spread = max(M.distance(p, q) for q in points)
    thresh = tol * (1 + spread)
    step = np.inf
    for _ in range(max_iter):
        v = M.log(p, points[0])
        for q in points[1:]:
            v = M.add(v, M.log(p, q))
        v = M.scale(v, 1.0 / n)
        step = M.norm(p, v)
        if step <= thresh:
            return p
        p = M.exp(p, v)
    raise ConvergenceError(
        f"Fréchet mean did not converge in {max_iter} iterations", residual=step)


def _fit_flat(M, s, xs):
    A = np.stack([M.chart(x) for x in xs])
    sc = s - s.mean()
    slope = np.tensordot(sc, A - A.mean(axis=0), axes=1) / np.dot(sc, sc)
    a0 = A.mean(axis=0) - s.mean() * slope
    return M.from_chart(a0), M.from_chart(a0 + slope), (True, 0.0, 0)


def _fit_curved(M, s, xs, max_iter=500, h=1e-5, c1=1e-4, max_step=0.5):
    X = np.stack([np.asarray(x, dtype=float) for x in xs])
    p = X[int(np.argmin(s))].copy()
    q = X[int(np.argmax(s))].copy()
    batch = M.batch_shape(p)
    k = M.elem_dim
    pad = (1,) * M.point_ndim

    def energy(p, q):
        D = M.log(p, q)
        E = np.zeros(batch)
        for si, xi in zip(s, X):
            g = M.exp(p, si * D)
            E = E + M.elem_sq_norm(g, M.log(g, xi))
        return E

    def gradient(p, q):
        gp = np.zeros(batch + (k,))
        gq = np.zeros(batch + (k,))
        for j in range(k):
            c = np.zeros(batch + (k,))
            c[..., j] = h
            dp = M.from_elem_coords(p, c)
            dq = M.from_elem_coords(q, c)
            gp[..., j] = (energy(M.exp(p, dp), q) - energy(M.exp(p, -dp), q)) / (2 * h)
            gq[..., j] = (energy(p, M.exp(q, dq)) - energy(p, M.exp(q, -dq))) / (2 * h)
        return gp, gq

    # Preconditioner: Hessian of the flat least-squares problem in (p, q).
    H = 2 * np.array([[np.sum((1 - s) ** 2), np.sum(s * (1 - s))],
                      [np.sum(s * (1 - s)), np.sum(s ** 2)]])
    Hinv = np.linalg.inv(H)
    eps = np.finfo(float).eps

    E = energy(p, q)
    gp, gq = gradient(p, q)
    gn2 = np.sum(gp ** 2, axis=-1) + np.sum(gq ** 2, axis=-1)
    stuck = np.zeros(batch, dtype=bool)
    it = 0
    for it in range(max_iter):
        active = (np.sqrt(gn2) > 1e-9 * (1 + E)) & ~stuck
        if not active.any():
            break
        dp = -(Hinv[0, 0] * gp + Hinv[0, 1] * gq)
        dq = -(Hinv[1, 0] * gp + Hinv[1, 1] * gq)
        slope = np.sum(gp * dp, axis=-1) + np.sum(gq * dq, axis=-1)
        dn = np.sqrt(np.sum(dp ** 2, axis=-1) + np.sum(dq ** 2, axis=-1))
        a = np.where(active, np.minimum(1.0, max_step / np.where(dn > 0, dn, 1.0)), 0.0)
        todo = active.copy()
        new_gp, new_gq, new_gn2 = gp.copy(), gq.copy(), gn2.copy()
        for _ in range(60):
            at = np.where(todo, a, 0.0)[..., None]
            cp = M.exp(p, M.from_elem_coords(p, at * dp))
            cq = M.exp(q, M.from_elem_coords(q, at * dq))
            cE = energy(cp, cq)
            ok = todo & (cE <= E + c1 * a * slope)
            # change of E below its roundoff: accept if the gradient shrinks
            flat = todo & ~ok & (cE <= E + 64 * eps * E)
            cgp = cgq = None
            if ok.any() or flat.any():
                cgp, cgq = gradient(cp, cq)
                cgn2 = np.sum(cgp ** 2, axis=-1) + np.sum(cgq ** 2, axis=-1)
                ok |= flat & (cgn2 < gn2)
                new_gp = np.where(ok[..., None], cgp, new_gp)
                new_gq = np.where(ok[..., None], cgq, new_gq)
                new_gn2 = np.where(ok, cgn2, new_gn2)
            mask = ok.reshape(batch + pad)
            p = np.where(mask, cp, p)
            q = np.where(mask, cq, q)
            E = np.where(ok, cE, E)
            todo &= ~ok
            if not todo.any():
                break
            a = np.where(todo, a / 2, a)
        gp, gq, gn2 = new_gp, new_gq, new_gn2
        # line search exhausted: numerically stationary, stop updating
        stuck |= todo
    else:
        it = max_iter
    grad_norm = float(np.sqrt(np.sum(gn2)))
    converged = bool(np.all(np.sqrt(gn2) <= 1e-9 * (1 + E)))
    return p, q, (converged, grad_norm, it)


def _fit(M, s, xs, max_iter):
    if isinstance(M, Product):
        parts = [_fit(Mi, s, [x[i] for x in xs], max_iter)
                 for i, Mi in enumerate(M.manifolds)]
        p = M._pack(part[0] for part in parts)
        q = M._pack(part[1] for part in parts)
        infos = [part[2] for part in parts]
        return p, q, (all(i[0] for i in infos),
                      float(np.sqrt(sum(i[1] ** 2 for i in infos))),
                      max(i[2] for i in infos))
    if M.flat:
        return _fit_flat(M, s, xs)
    return _fit_curved(M, s, xs, max_iter=max_iter)


def geodesic_regression(manifold, samples, cap=DEFAULT_CAP, max_iter=500):
    """Least-squares geodesic through parameter-labelled manifold data.

    Parameters are rescaled to [0, 1] internally; the returned segment maps
    ``t_min`` to its start point and ``t_max`` to its end point.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise DesignError("geodesic regression needs at least two samples")
    t = np.array([float(x.param) for x in samples])
    if not np.all(np.isfinite(t)):
        raise DesignError("sample parameters must be finite")
    t_min, t_max = float(t.min()), float(t.max())
    if t_max == t_min:
        raise DesignError("all sample parameters are equal")
    s = (t - t_min) / (t_max - t_min)
    p, q, (converged, grad_norm, iterations) = _fit(
        manifold, s, [x.shape for x in samples], max_iter)
    if not converged:
        logger.warning("geodesic regression stopped after %d iterations "
                       "with gradient norm %.3g", iterations, grad_norm)
    segment = GeodesicSegment(manifold, p, q, t_min, t_max, cap)
    report = residual_report(segment, samples)
    report.converged = converged
    report.grad_norm = grad_norm
    report.iterations = iterations
    return report


def residual_report(segment, samples):
    M = segment.manifold
    residuals = []
    dists = []
    for x in samples:
        g = segment.evaluate(x.param)
        v = M.log(g, x.shape)
        residuals.append(v)
        dists.append(M.norm(g, v))
    dists = np.array(dists)
    return RegressionReport(segment, float(np.sum(dists ** 2)), dists, residuals)


def _slope(segment, x, t):
    """Derivative of half the squared distance from the curve at t to x."""
    M = segment.manifold
    g, vel = segment.velocity(t)
    return -M.inner(g, vel, M.log(g, x))


def project(segment, x, search=None, rel_tol=1e-6):
    """Parameter of the point on the geodesic closest to ``x``.

    Golden-section search over ``search`` (default: the segment interval
    extended by the cap) down to ``rel_tol * (b - a)``; ties go toward ``a``.
    A sign change of the distance derivative inside the final bracket is then
    polished by regula falsi.
    """
    a, b = search if search is not None else segment.search_interval()
    if not a < b:
        raise ValueError("search interval must satisfy a < b")
    M = segment.manifold

    def f(t):
        return M.distance(segment.evaluate(t), x)

    lo, hi = float(a), float(b)
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    tol = rel_tol * (b - a)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INVPHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INVPHI * (hi - lo)
            fd = f(d)
    glo, ghi = _slope(segment, x, lo), _slope(segment, x, hi)
    if glo < 0 < ghi:
        return _illinois(lambda t: _slope(segment, x, t), lo, hi, glo, ghi,
                         1e-15 * (b - a))
    return float(lo if f(lo) <= f(hi) else hi)


def _illinois(g, lo, hi, glo, ghi, xtol, max_iter=100):
    best = 0.5 * (lo + hi)
    side = 0
    for _ in range(max_iter):
        t = (lo * ghi - hi * glo) / (ghi - glo)
        if not lo < t < hi:
            break
        best = t
        gt = g(t)
        if gt == 0:
            break
        if gt < 0:
            lo, glo = t, gt
            if side < 0:
                ghi *= 0.5
            side = -1
        else:
            hi, ghi = t, gt
            if side > 0:
                glo *= 0.5
            side = 1
        if hi - lo <= xtol:
            break
    return float(best)


def normalize_group(samples, segment, t0, return_vectors=False):
    """Move each sample's regression residual to ``t0`` by parallel transport.

    Returns the normalized points in input order, and optionally the pairs
    of residual vectors ``(v_j, w_j)`` before and after transport.
    """
    M = segment.manifold
    g0 = segment.evaluate(t0)
    out, vecs = [], []
    for x in samples:
        g = segment.evaluate(x.param)
        v = M.log(g, x.shape)
        w = M.transport(g, g0, v)
        out.append(M.exp(g0, w))
        vecs.append((v, w))
    return (out, vecs) if return_vectors else out


def mahalanobis(manifold, samples, x, mean=None, rcond=1e-10):
    """Mahalanobis distance of ``x`` to ``samples`` in the tangent space at their mean.

    The sample covariance (divisor n - 1) is inverted by its pseudoinverse,
    truncating eigenvalues below ``rcond`` times the largest.
    """
    samples = list(samples)
    n = len(samples)
    if n < 2:
        raise DesignError("Mahalanobis distance needs at least two samples")
    M = manifold
    mu = frechet_mean(M, samples) if mean is None else mean
    Y = np.stack([M.to_coords(mu, M.log(mu, q)) for q in samples])
    u = M.to_coords(mu, M.log(mu, x))
    Yc = Y - Y.mean(axis=0)
    _, S, Vt = np.linalg.svd(Yc, full_matrices=False)
    var = S ** 2 / (n - 1)
    if var.size == 0 or var.max() == 0:
        return 0.0
    keep = var > rcond * var.max()
    z = Vt[keep] @ u
    return float(np.sqrt(np.sum(z ** 2 / var[keep])))


def loocv(manifold, samples, cap=DEFAULT_CAP, max_iter=500):
    """Leave-one-out prediction of each sample's parameter by projection."""
    samples = list(samples)
    if len(samples) < 3:
        raise DesignError("leave-one-out needs at least three samples")
    preds, intervals = [], []
    for i, held in enumerate(samples):
        rest = samples[:i] + samples[i + 1:]
        try:
            seg = geodesic_regression(manifold, rest, cap=cap, max_iter=max_iter).segment
            interval = seg.search_interval()
            preds.append(project(seg, held.shape, interval))
        except ShapeError as exc:
            raise SampleError(held.id or i, exc) from exc
        intervals.append(interval)
    params = np.array([float(x.param) for x in samples])
    preds = np.array(preds)
    return LOOCVResult([x.id for x in samples], params, preds,
                       np.abs(preds - params), intervals)
