"""Riemannian manifolds used by the shape statistics.

Points and tangent vectors are plain numpy arrays (or tuples of arrays for
product manifolds).  The rotation and SPD manifolds are *power* manifolds: a
point is an array of shape ``(..., 3, 3)`` and every operation acts
element-wise over the leading axes, so one instance covers all faces of a mesh
at once.  Inner products sum over elements with optional per-element weights.

Tangent conventions:

* ``SO3``: skew-symmetric matrices in left-translated coordinates, i.e. the
  tangent ``p @ Omega`` is stored as ``Omega``.
* ``SPD``: symmetric matrices in the matrix-logarithm chart, where the
  Log-Euclidean metric is flat.
* ``Euclidean`` and ``Sphere``: ambient vectors.
"""
import numpy as np

from .errors import CutLocusError, InjectivityError, ManifoldError

#: Relative rotation angles closer than this to pi are refused by ``SO3.log``.
CUT_LOCUS_MARGIN = 1e-6


def _check_finite(*arrays):
    for a in arrays:
        if isinstance(a, tuple):
            _check_finite(*a)
        elif not np.all(np.isfinite(a)):
            raise ManifoldError("non-finite input")


def hat(w):
    """Map ``(..., 3)`` vectors to skew-symmetric ``(..., 3, 3)`` matrices."""
    w = np.asarray(w, dtype=float)
    W = np.zeros(w.shape[:-1] + (3, 3))
    W[..., 0, 1] = -w[..., 2]
    W[..., 0, 2] = w[..., 1]
    W[..., 1, 0] = w[..., 2]
    W[..., 1, 2] = -w[..., 0]
    W[..., 2, 0] = -w[..., 1]
    W[..., 2, 1] = w[..., 0]
    return W


def vee(W):
    """Inverse of :func:`hat` (uses the skew part of ``W``)."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.stack([W[..., 2, 1] - W[..., 1, 2],
                           W[..., 0, 2] - W[..., 2, 0],
                           W[..., 1, 0] - W[..., 0, 1]], axis=-1)


def skew(A):
    return 0.5 * (A - np.swapaxes(A, -1, -2))


def sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def so3_expm(W):
    """Rodrigues formula for skew matrices, batched."""
    W = skew(np.asarray(W, dtype=float))
    th2 = np.sum(vee(W) ** 2, axis=-1)
    th = np.sqrt(th2)
    small = th < 1e-4
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1 - th2 / 6 + th2 ** 2 / 120, np.sin(ths) / ths)
    b = np.where(small, 0.5 - th2 / 24 + th2 ** 2 / 720,
                 (1 - np.cos(ths)) / ths ** 2)
    return (np.eye(3) + a[..., None, None] * W
            + b[..., None, None] * (W @ W))


def so3_angle(R):
    """Rotation angle in [0, pi] of each rotation matrix."""
    s = np.linalg.norm(vee(skew(R)), axis=-1)
    c = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    return np.arctan2(s, c)


def so3_logm(R):
    """Principal matrix logarithm of rotations; refuses angles near pi."""
    R = np.asarray(R, dtype=float)
    s = vee(skew(R))
    sn = np.linalg.norm(s, axis=-1)
    c = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1) / 2, -1.0, 1.0)
    th = np.arctan2(sn, c)
    if np.any(th > np.pi - CUT_LOCUS_MARGIN):
        bad = np.flatnonzero(np.ravel(th) > np.pi - CUT_LOCUS_MARGIN)
        raise CutLocusError(
            f"relative rotation angle within {CUT_LOCUS_MARGIN:g} of pi "
            f"(elements {bad[:10].tolist()})")
    small = th < 1e-4
    f = np.where(small, 1 + th ** 2 / 6 + 7 * th ** 4 / 360,
                 th / np.where(small, 1.0, np.sin(th)))
    return hat(f[..., None] * s)


def sym_funm(S, fn):
    """Apply a scalar function to a batch of symmetric matrices."""
    lam, V = np.linalg.eigh(sym(np.asarray(S, dtype=float)))
    return (V * fn(lam)[..., None, :]) @ np.swapaxes(V, -1, -2)


def spd_logm(A):
    lam, V = np.linalg.eigh(sym(np.asarray(A, dtype=float)))
    if np.any(lam <= 0):
        raise ManifoldError("matrix is not positive definite")
    return (V * np.log(lam)[..., None, :]) @ np.swapaxes(V, -1, -2)


def spd_expm(S):
    return sym_funm(S, np.exp)


class Manifold:
    """Interface shared by all manifolds.

    Subclasses implement ``exp``, ``log``, ``transport`` and ``inner``; the
    remaining operations are derived from those.  ``flat`` manifolds also
    provide a global chart (``chart``/``from_chart``) in which geodesics are
    straight lines; curved ones expose per-element coordinates for the
    optimisers in :mod:`diffshape.stats`.
    """

    flat = False

    def exp(self, p, v):
        raise NotImplementedError

    def log(self, p, q):
        raise NotImplementedError

    def transport(self, p, q, v):
        raise NotImplementedError

    def inner(self, p, u, v):
        raise NotImplementedError

    def to_coords(self, p, v):
        """Flat coordinate vector of ``v`` whose dot product is ``inner``."""
        raise NotImplementedError

    def random_tangent(self, p, rng, scale=1.0):
        raise NotImplementedError

    def norm(self, p, v):
        return float(np.sqrt(max(self.inner(p, v, v), 0.0)))

    def distance(self, p, q):
        return self.norm(p, self.log(p, q))

    def geodesic_point(self, p, q, t):
        return self.exp(p, self.scale(self.log(p, q), t))

    def geodesic_velocity(self, p, q, t):
        """Velocity at ``geodesic_point(p, q, t)`` of the geodesic with
        ``geodesic_point(p, q, 0) = p`` and ``geodesic_point(p, q, 1) = q``."""
        return self.transport(p, self.geodesic_point(p, q, t), self.log(p, q))

    # vector-space operations on tangent representations
    def zero_vector(self, p):
        return np.zeros_like(np.asarray(p, dtype=float))

    def scale(self, v, a):
        return a * v

    def add(self, u, v):
        return u + v


class _ElementwiseManifold(Manifold):
    """Power manifold over the leading axes with per-element weights."""

    point_ndim = 2

    def __init__(self, count=None, weight=1.0):
        self.count = count
        self.weight = np.asarray(weight, dtype=float)
        if np.any(self.weight < 0):
            raise ManifoldError("metric weights must be nonnegative")

    def batch_shape(self, p):
        return np.shape(p)[:np.ndim(p) - self.point_ndim]

    def elem_sq_norm(self, p, v):
        """Unweighted squared norm of each element of ``v``."""
        raise NotImplementedError

    def inner(self, p, u, v):
        return float(np.sum(self.weight * self._elem_inner(u, v)))


class SO3(_ElementwiseManifold):
    """Rotation group with the bi-invariant metric ``w * tr(A^T B) / 2``.

    With unit weight the geodesic distance equals the relative rotation angle.
    """

    elem_dim = 3

    def exp(self, p, v):
        _check_finite(p, v)
        ang = np.sqrt(self.elem_sq_norm(p, v))
        if np.any(ang >= np.pi):
            raise InjectivityError(
                f"tangent norm {float(np.max(ang)):.6g} >= pi exceeds the "
                "injectivity radius of SO(3)")
        return p @ so3_expm(v)

    def log(self, p, q):
        _check_finite(p, q)
        return so3_logm(np.swapaxes(p, -1, -2) @ q)

    def geodesic_point(self, p, q, t):
        # the geodesic extends past the cut locus; only exp as an inverse of
        # log is restricted to the injectivity radius
        return p @ so3_expm(t * self.log(p, q))

    def geodesic_velocity(self, p, q, t):
        # one-parameter subgroup: constant in left-trivialised coordinates
        return self.log(p, q)

    def transport(self, p, q, v):
        # left-trivialised Levi-Civita transport: Y(1) = Ad_{exp(-D/2)} Y(0)
        D = self.log(p, q)
        E = so3_expm(-0.5 * D)
        return skew(E @ v @ np.swapaxes(E, -1, -2))

    def _elem_inner(self, u, v):
        return 0.5 * np.sum(u * v, axis=(-2, -1))

    def elem_sq_norm(self, p, v):
        return self._elem_inner(v, v)

    def from_elem_coords(self, p, c):
        return hat(c)

    def to_coords(self, p, v):
        w = np.sqrt(self.weight)[..., None] if self.weight.ndim else np.sqrt(self.weight)
        return np.ravel(w * vee(v))

    def random_point(self, rng, scale=1.0):
        shape = () if self.count is None else (self.count,)
        return so3_expm(hat(scale * rng.normal(size=shape + (3,))))

    def random_tangent(self, p, rng, scale=1.0):
        return hat(scale * rng.normal(size=self.batch_shape(p) + (3,)))


_OFFDIAG = (np.array([0, 0, 1]), np.array([1, 2, 2]))


class SPD(_ElementwiseManifold):
    """Symmetric positive-definite 3x3 matrices with the Log-Euclidean metric.

    Tangent vectors live in the matrix-logarithm chart where the metric is
    the (weighted) Frobenius product and parallel transport is the identity.
    """

    flat = True
    elem_dim = 6

    def chart(self, p):
        return spd_logm(p)

    def from_chart(self, a):
        return spd_expm(a)

    def exp(self, p, v):
        _check_finite(p, v)
        return spd_expm(spd_logm(p) + sym(v))

    def log(self, p, q):
        _check_finite(p, q)
        return spd_logm(q) - spd_logm(p)

    def transport(self, p, q, v):
        return np.array(v, dtype=float, copy=True)

    def geodesic_point(self, p, q, t):
        a = spd_logm(p)
        return spd_expm(a + t * (spd_logm(q) - a))

    def _elem_inner(self, u, v):
        return np.sum(u * v, axis=(-2, -1))

    def elem_sq_norm(self, p, v):
        return self._elem_inner(v, v)

    def to_coords(self, p, v):
        v = np.asarray(v, dtype=float)
        c = np.concatenate([np.diagonal(v, axis1=-2, axis2=-1),
                            np.sqrt(2.0) * v[..., _OFFDIAG[0], _OFFDIAG[1]]],
                           axis=-1)
        w = np.sqrt(self.weight)[..., None] if self.weight.ndim else np.sqrt(self.weight)
        return np.ravel(w * c)

    def random_point(self, rng, scale=1.0):
        shape = () if self.count is None else (self.count,)
        return spd_expm(sym(scale * rng.normal(size=shape + (3, 3))))

    def random_tangent(self, p, rng, scale=1.0):
        return sym(scale * rng.normal(size=self.batch_shape(p) + (3, 3)))


class Euclidean(Manifold):
    """Flat vector space; exp is addition, log subtraction, transport identity."""

    flat = True

    def __init__(self, shape=(), weight=1.0):
        self.shape = (shape,) if np.isscalar(shape) else tuple(shape)
        self.weight = float(weight)

    def chart(self, p):
        return np.asarray(p, dtype=float)

    def from_chart(self, a):
        return np.asarray(a, dtype=float)

    def exp(self, p, v):
        _check_finite(p, v)
        return np.asarray(p, dtype=float) + v

    def log(self, p, q):
        _check_finite(p, q)
        return np.asarray(q, dtype=float) - p

    def transport(self, p, q, v):
        return np.array(v, dtype=float, copy=True)

    def inner(self, p, u, v):
        return float(self.weight * np.sum(np.multiply(u, v)))

    def geodesic_point(self, p, q, t):
        p = np.asarray(p, dtype=float)
        return p + t * (np.asarray(q, dtype=float) - p)

    def to_coords(self, p, v):
        return np.sqrt(self.weight) * np.ravel(np.asarray(v, dtype=float))

    def random_tangent(self, p, rng, scale=1.0):
        return scale * rng.normal(size=np.shape(p))


class Sphere(_ElementwiseManifold):
    """Unit sphere S^2 in R^3; a small curved manifold for testing."""

    point_ndim = 1
    elem_dim = 2

    def exp(self, p, v):
        _check_finite(p, v)
        nv = np.linalg.norm(v, axis=-1)[..., None]
        safe = np.where(nv > 0, nv, 1.0)
        q = np.cos(nv) * p + np.where(nv > 0, np.sin(nv) / safe, 1.0) * v
        return q / np.linalg.norm(q, axis=-1)[..., None]

    def log(self, p, q):
        _check_finite(p, q)
        c = np.sum(p * q, axis=-1)[..., None]
        u = q - c * p
        s = np.linalg.norm(u, axis=-1)[..., None]
        th = np.arctan2(s, c)
        if np.any(th > np.pi - CUT_LOCUS_MARGIN):
            raise CutLocusError("antipodal points on the sphere")
        return np.where(s > 0, th / np.where(s > 0, s, 1.0), 1.0) * u

    def geodesic_point(self, p, q, t):
        u = self.log(p, q)
        th = np.linalg.norm(u, axis=-1)[..., None]
        e = np.where(th > 0, u / np.where(th > 0, th, 1.0), 0.0)
        x = np.cos(t * th) * p + np.sin(t * th) * e
        return x / np.linalg.norm(x, axis=-1)[..., None]

    def geodesic_velocity(self, p, q, t):
        u = self.log(p, q)
        th = np.linalg.norm(u, axis=-1)[..., None]
        e = np.where(th > 0, u / np.where(th > 0, th, 1.0), 0.0)
        return th * (np.cos(t * th) * e - np.sin(t * th) * p)

    def transport(self, p, q, v):
        u = self.log(p, q)
        w = self.log(q, p)
        th2 = np.sum(u * u, axis=-1)[..., None]
        if np.all(th2 == 0):
            return np.array(v, dtype=float, copy=True)
        coef = np.where(th2 > 0, np.sum(u * v, axis=-1)[..., None]
                        / np.where(th2 > 0, th2, 1.0), 0.0)
        return v - coef * (u + w)

    def _elem_inner(self, u, v):
        return np.sum(u * v, axis=-1)

    def elem_sq_norm(self, p, v):
        return self._elem_inner(v, v)

    def _basis(self, p):
        p = np.asarray(p, dtype=float)
        a = np.where(np.abs(p[..., :1]) < 0.9, np.array([1.0, 0, 0]),
                     np.array([0, 1.0, 0]))
        e1 = a - np.sum(a * p, axis=-1)[..., None] * p
        e1 /= np.linalg.norm(e1, axis=-1)[..., None]
        e2 = np.cross(p, e1)
        return e1, e2

    def from_elem_coords(self, p, c):
        e1, e2 = self._basis(p)
        return c[..., :1] * e1 + c[..., 1:2] * e2

    def to_coords(self, p, v):
        return np.ravel(np.sqrt(self.weight) * np.asarray(v, dtype=float))

    def random_tangent(self, p, rng, scale=1.0):
        return self.from_elem_coords(p, scale * rng.normal(size=self.batch_shape(p) + (2,)))


class Product(Manifold):
    """Cartesian product; points and tangents are tuples of component values.

    The metric is the weighted sum of component metrics.
    """

    def __init__(self, manifolds, weights=None):
        self.manifolds = tuple(manifolds)
        if weights is None:
            weights = (1.0,) * len(self.manifolds)
        if len(weights) != len(self.manifolds):
            raise ManifoldError("one weight per component required")
        if any(w < 0 for w in weights):
            raise ManifoldError("metric weights must be nonnegative")
        self.weights = tuple(float(w) for w in weights)

    @property
    def flat(self):
        return all(M.flat for M in self.manifolds)

    def _pack(self, components):
        return tuple(components)

    def _check(self, *items):
        for x in items:
            if len(x) != len(self.manifolds):
                raise ManifoldError(
                    f"expected {len(self.manifolds)} components, got {len(x)}")

    def exp(self, p, v):
        self._check(p, v)
        return self._pack(M.exp(a, b) for M, a, b in zip(self.manifolds, p, v))

    def log(self, p, q):
        self._check(p, q)
        return tuple(M.log(a, b) for M, a, b in zip(self.manifolds, p, q))

    def transport(self, p, q, v):
        self._check(p, q, v)
        return tuple(M.transport(a, b, c)
                     for M, a, b, c in zip(self.manifolds, p, q, v))

    def inner(self, p, u, v):
        self._check(p, u, v)
        return float(sum(w * M.inner(a, b, c) for M, w, a, b, c
                         in zip(self.manifolds, self.weights, p, u, v)))

    def geodesic_point(self, p, q, t):
        self._check(p, q)
        return self._pack(M.geodesic_point(a, b, t)
                          for M, a, b in zip(self.manifolds, p, q))

    def geodesic_velocity(self, p, q, t):
        self._check(p, q)
        return tuple(M.geodesic_velocity(a, b, t)
                     for M, a, b in zip(self.manifolds, p, q))

    def to_coords(self, p, v):
        return np.concatenate([np.sqrt(w) * M.to_coords(a, b) for M, w, a, b
                               in zip(self.manifolds, self.weights, p, v)])

    def random_tangent(self, p, rng, scale=1.0):
        return tuple(M.random_tangent(a, rng, scale)
                     for M, a in zip(self.manifolds, p))

    def zero_vector(self, p):
        return tuple(M.zero_vector(a) for M, a in zip(self.manifolds, p))

    def scale(self, v, a):
        return tuple(M.scale(x, a) for M, x in zip(self.manifolds, v))

    def add(self, u, v):
        return tuple(M.add(x, y) for M, x, y in zip(self.manifolds, u, v))
