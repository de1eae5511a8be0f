"""Acceptance suite.

Criteria 1-8 are property based and need no external data.  Criterion 9
requires the published processed shadow-surface meshes, which are not
distributed with this package, so it is always reported as skipped.

Run with ``pytest tests/test_acceptance.py`` (a per-criterion summary is
printed at the end of the session) or ``python3 tests/test_acceptance.py``.
"""
import sys
import time

import numpy as np
import pytest

from diffshape.diffcoords import (ReferenceMesh, ShapeSpace, TriangleMesh, decode, encode)
from diffshape.manifold import SO3, SPD, Euclidean, Sphere, hat, so3_expm
from diffshape.meshprep import fold_trend, sphere_fit, synthesize_dataset, trough_mesh
from diffshape.stats import (GeodesicSegment, LabeledSample, frechet_mean,
                             geodesic_regression, loocv, mahalanobis, normalize_group,
                             project)

RESULTS = {}

TITLES = {
    1: "manifold roundtrips, transport isometry, subdivision invariance",
    2: "encode/decode roundtrip, translation invariance, rotation covariance",
    3: "regression exactness on noise-free synthetic data",
    4: "flat-oracle parity of regression, projection, normalization, loocv",
    5: "normalization detrends",
    6: "LOOCV MAE decreases with noise",
    7: "sphere fit recovery",
    8: "Mahalanobis distance increases after normalization",
    9: "published-data reproduction (data-dependent)",
}


def _samples(points, params):
    return [LabeledSample(x, float(t), "g", str(i)) for i, (x, t) in enumerate(zip(points, params))]


def _shape_point(m, rng, scale=1.0):
    return (SO3(m).random_point(rng, scale), SPD(m).random_point(rng, 0.3 * scale))


# -- criterion 1 ----------------------------------------------------------------

def _clip_angles(v, max_angle):
    ang = np.sqrt(0.5 * np.sum(v * v, axis=(-2, -1)))
    return v * np.minimum(1.0, max_angle / np.maximum(ang, 1e-300))[..., None, None]


def criterion_1():
    rng = np.random.default_rng(1)
    N = 1000
    worst = {}
    # element-wise manifolds: one batched call evaluates N independent pairs
    cases = {
        "SO3": (SO3(N), SO3(N).random_point(rng),
                lambda p: _clip_angles(SO3(N).random_tangent(p, rng, 1.0), 3.0)),
        "SPD": (SPD(N), SPD(N).random_point(rng), lambda p: SPD(N).random_tangent(p, rng, 1.0)),
        "S2": (Sphere(N), _unit(rng.normal(size=(N, 3))),
               lambda p: _clip_sphere(Sphere(N).random_tangent(p, rng, 1.0), 3.0)),
        "R3": (Euclidean((N, 3)), rng.normal(size=(N, 3)), lambda p: rng.normal(size=(N, 3))),
    }
    for name, (M, p, tangent) in cases.items():
        v = tangent(p)
        rt = np.abs(M.log(p, M.exp(p, v)) - v)
        rt = rt.reshape(N, -1).max(axis=1)
        q = M.exp(p, tangent(p) * 0.8)
        u, w = M.random_tangent(p, rng), M.random_tangent(p, rng)
        Tu, Tw = M.transport(p, q, u), M.transport(p, q, w)
        iso = np.abs(_elem_inner(M, Tu, Tw) - _elem_inner(M, u, w))
        mid = M.geodesic_point(p, q, 0.5)
        sub = np.abs(M.transport(mid, q, M.transport(p, mid, u)) - Tu).reshape(N, -1).max(axis=1)
        worst[name] = (rt.max(), iso.max(), sub.max())
    # product shape space, pair by pair
    S = ShapeSpace(4)
    errs = np.zeros(3)
    for _ in range(N):
        p = _shape_point(4, rng)
        v = (_clip_angles(S.random_tangent(p, rng)[0], 3.0), S.random_tangent(p, rng)[1])
        r = S.log(p, S.exp(p, v))
        e_rt = max(np.abs(r[0] - v[0]).max(), np.abs(r[1] - v[1]).max())
        q = S.exp(p, (_clip_angles(S.random_tangent(p, rng)[0], 2.5), S.random_tangent(p, rng)[1]))
        u, w = S.random_tangent(p, rng), S.random_tangent(p, rng)
        Tu = S.transport(p, q, u)
        e_iso = abs(S.inner(q, Tu, S.transport(p, q, w)) - S.inner(p, u, w))
        mid = S.geodesic_point(p, q, 0.5)
        two = S.transport(mid, q, S.transport(p, mid, u))
        e_sub = max(np.abs(two[0] - Tu[0]).max(), np.abs(two[1] - Tu[1]).max())
        errs = np.maximum(errs, [e_rt, e_iso, e_sub])
    worst["(SO3xSPD)^4"] = tuple(errs)
    for name, (rt, iso, sub) in worst.items():
        assert rt <= 1e-8, f"{name}: roundtrip error {rt:.3g}"
        assert iso <= 1e-8, f"{name}: isometry error {iso:.3g}"
        assert sub <= 1e-6, f"{name}: subdivision error {sub:.3g}"
    return "; ".join(f"{k} rt={v[0]:.1e} iso={v[1]:.1e} sub={v[2]:.1e}" for k, v in worst.items())


def _unit(x):
    return x / np.linalg.norm(x, axis=-1)[..., None]


def _clip_sphere(v, max_angle):
    n = np.linalg.norm(v, axis=-1)
    return v * np.minimum(1.0, max_angle / np.maximum(n, 1e-300))[..., None]


def _elem_inner(M, u, v):
    if isinstance(M, Euclidean):
        return np.sum(u * v, axis=-1)
    return M._elem_inner(u, v)


# -- criterion 2 ----------------------------------------------------------------

def _deform(mesh, rng, amp=0.15):
    V = mesh.vertices
    A = np.eye(3) + amp * rng.normal(size=(3, 3))
    B = amp * rng.normal(size=(3, 3))
    return TriangleMesh(V @ A.T + amp * np.sin(V @ B.T), mesh.faces)


def criterion_2():
    rng = np.random.default_rng(2)
    base = trough_mesh(nu=40, nv=5)
    assert base.n_vertices == 200
    ref = ReferenceMesh(base)
    worst_rms = worst_rot = 0.0
    for _ in range(50):
        T = _deform(base, rng)
        out = decode(encode(T, ref), ref).vertices
        target = T.vertices - T.vertices.mean(axis=0)
        rms = np.sqrt(np.mean(np.sum((out - target) ** 2, axis=1))) / T.bbox_diagonal()
        worst_rms = max(worst_rms, rms)
        R0 = so3_expm(hat(rng.normal(size=3)))
        a, b = encode(T, ref), encode(T.transformed(R0), ref)
        worst_rot = max(worst_rot, np.abs(b.rotations - R0 @ a.rotations).max(),
                        np.abs(b.stretches - a.stretches).max())
    assert worst_rms <= 1e-6, f"roundtrip RMS/diag {worst_rms:.3g}"
    assert worst_rot <= 1e-10, f"rotation covariance error {worst_rot:.3g}"
    # dyadic vertices and translations keep all edge vectors exact in floating point
    u, v = np.meshgrid(np.arange(40) / 8.0, np.arange(5) / 4.0, indexing="ij")
    V = np.stack([u.ravel(), v.ravel(), (u * v).ravel() / 16], axis=1)
    dref = ReferenceMesh(TriangleMesh(V, base.faces))
    exact = True
    for _ in range(10):
        W = V + rng.integers(-8, 9, size=V.shape) / 64.0
        t = rng.integers(-1000, 1000, size=3) / 4.0
        a = encode(TriangleMesh(W, base.faces), dref)
        b = encode(TriangleMesh(W + t, base.faces), dref)
        exact &= np.array_equal(a.rotations, b.rotations) and np.array_equal(a.stretches, b.stretches)
    assert exact, "translation changed the encoding"
    return f"max RMS/diag={worst_rms:.1e}, rotation covariance={worst_rot:.1e}, translation exact"


# -- criterion 3 ----------------------------------------------------------------

def criterion_3():
    rng = np.random.default_rng(3)
    worst_sse = worst_pt = 0.0
    for n in (4, 10):
        for m in (8, 64):
            S = ShapeSpace(m)
            base = _shape_point(m, rng)
            trend = S.random_tangent(base, rng, 0.25)
            t = np.sort(rng.uniform(40.0, 44.0, size=n))
            s = (t - t[0]) / (t[-1] - t[0])
            gen = [S.exp(base, S.scale(trend, si)) for si in s]
            fit = geodesic_regression(S, _samples(gen, t))
            worst_sse = max(worst_sse, fit.sse)
            for ti, g in zip(t, gen):
                worst_pt = max(worst_pt, S.distance(fit.segment.evaluate(ti), g))
    assert worst_sse <= 1e-10, f"sse {worst_sse:.3g}"
    assert worst_pt <= 1e-6, f"fitted shape error {worst_pt:.3g}"
    return f"max sse={worst_sse:.1e}, max shape error={worst_pt:.1e}"


# -- criterion 4 ----------------------------------------------------------------

def _ols(t, Y):
    A = np.column_stack([np.ones_like(t), t])
    return np.linalg.lstsq(A, Y, rcond=None)[0]


def criterion_4():
    rng = np.random.default_rng(4)
    d = 5
    E = Euclidean((d,))
    t = np.sort(rng.uniform(40.0, 44.0, size=9))
    Y = np.outer(t - 42, rng.normal(size=d)) + 0.3 * rng.normal(size=(9, d))
    data = _samples(list(Y), t)
    c0, c1 = _ols(t, Y)
    errs = {}
    seg = geodesic_regression(E, data).segment
    errs["regression"] = max(np.abs(seg.evaluate(ti) - (c0 + c1 * ti)).max() for ti in t)
    x = rng.normal(size=d) + c0 + 42 * c1
    lo, hi = seg.search_interval()
    t_star = np.clip((x - c0) @ c1 / (c1 @ c1), lo, hi)
    errs["projection"] = abs(project(seg, x) - t_star)
    norm = np.array(normalize_group(data, seg, 42.0))
    errs["normalization"] = np.abs(norm - (Y - (c0 + np.outer(t, c1)) + (c0 + 42.0 * c1))).max()
    res = loocv(E, data)
    pred = []
    for i in range(len(t)):
        keep = np.arange(len(t)) != i
        a0, a1 = _ols(t[keep], Y[keep])
        span = t[keep].max() - t[keep].min()
        pred.append(np.clip((Y[i] - a0) @ a1 / (a1 @ a1),
                            t[keep].min() - 3 * span, t[keep].max() + 3 * span))
    errs["loocv"] = np.abs(res.predictions - np.array(pred)).max()
    for k, v in errs.items():
        assert v <= 1e-8, f"{k}: {v:.3g}"
    return ", ".join(f"{k}={v:.1e}" for k, v in errs.items())


# -- criterion 5 ----------------------------------------------------------------

def _fold_setup(rng):
    ref = ReferenceMesh(trough_mesh(nu=8, nv=5))
    S = ref.shape_space()
    fold = fold_trend(ref, 0.3)
    trend = (fold[0], S.manifolds[1].random_tangent(S.identity()[1], rng, 0.05))
    return ref, S, trend


def criterion_5():
    rng = np.random.default_rng(5)
    ref, S, trend = _fold_setup(rng)
    t = np.linspace(0.0, 3.0, 8)
    t0 = 1.5
    data = synthesize_dataset(ref, trend, 1e-4, t, seed=5, decode_meshes=False)
    fit = geodesic_regression(S, data.samples)
    pts, vecs = normalize_group(data.samples, fit.segment, t0, return_vectors=True)
    refit = geodesic_regression(S, _samples(pts, t))
    ratio = refit.segment.length / fit.segment.length
    g0 = fit.segment.evaluate(t0)
    norm_err = max(abs(S.distance(g0, x) - S.norm(fit.segment.evaluate(s.param), v))
                   for x, s, (v, _) in zip(pts, data.samples, vecs))
    clean = synthesize_dataset(ref, trend, 0.0, t, seed=5, decode_meshes=False)
    cseg = geodesic_regression(S, clean.samples).segment
    collapse = max(S.distance(x, cseg.evaluate(t0)) for x in normalize_group(clean.samples, cseg, t0))
    assert ratio <= 1e-6, f"refit length ratio {ratio:.3g}"
    assert norm_err <= 1e-8, f"residual norm change {norm_err:.3g}"
    assert collapse <= 1e-8, f"on-geodesic collapse {collapse:.3g}"
    return f"length ratio={ratio:.1e}, norm change={norm_err:.1e}, collapse={collapse:.1e}"


# -- criterion 6 ----------------------------------------------------------------

def criterion_6():
    ref = ReferenceMesh(trough_mesh(nu=8, nv=5))
    S = ref.shape_space()
    trend = fold_trend(ref, 0.3)
    t = np.linspace(0.0, 3.0, 6)
    monotone = 0
    rows = []
    for seed in range(5):
        maes = [loocv(S, synthesize_dataset(ref, trend, nz, t, seed=seed,
                                            decode_meshes=False).samples).mae
                for nz in (1e-1, 1e-2, 1e-3)]
        ok = maes[0] > maes[1] > maes[2]
        monotone += ok
        rows.append("/".join(f"{m:.1e}" for m in maes))
    assert monotone >= 3, f"only {monotone}/5 seeds monotone"
    return f"{monotone}/5 monotone; MAE per seed (noise 1e-1/1e-2/1e-3): " + ", ".join(rows)


# -- criterion 7 ----------------------------------------------------------------

def criterion_7():
    rng = np.random.default_rng(7)
    c0, r0 = np.array([0.4, -1.3, 2.0]), 2.5
    d = _unit(rng.normal(size=(400, 3)))
    d = d[d[:, 2] > 0.2]  # a spherical cap, like a sundial bowl
    exact = sphere_fit(c0 + r0 * d)
    e_exact = max(np.abs(exact.center - c0).max(), abs(exact.radius - r0)) / r0
    noisy = sphere_fit(c0 + (r0 * (1 + 0.01 * rng.normal(size=len(d))))[:, None] * d)
    e_noisy = abs(noisy.radius - r0) / r0
    assert e_exact <= 1e-8, f"noise-free error {e_exact:.3g}"
    assert e_noisy <= 0.01, f"noisy radius error {e_noisy:.3g}"
    return f"noise-free rel. error={e_exact:.1e}, 1% noise radius error={e_noisy:.2%}"


# -- criterion 8 ----------------------------------------------------------------

def criterion_8():
    rng = np.random.default_rng(8)
    S = ShapeSpace(2)
    I = S.identity()
    trend = S.random_tangent(I, rng, 0.3)
    base2 = S.exp(I, S.random_tangent(I, rng, 0.1))

    def group(base, n):
        out = []
        for ti in rng.uniform(0.0, 3.0, n):
            g = S.exp(base, S.transport(I, base, S.scale(trend, ti)))
            out.append(LabeledSample(S.exp(g, S.random_tangent(g, rng, 0.02)), ti))
        return out

    g1, g2 = group(I, 30), group(base2, 30)
    before = mahalanobis(S, [s.shape for s in g1], frechet_mean(S, [s.shape for s in g2]))
    n1 = normalize_group(g1, geodesic_regression(S, g1).segment, 1.5)
    n2 = normalize_group(g2, geodesic_regression(S, g2).segment, 1.5)
    after = mahalanobis(S, n1, frechet_mean(S, n2))
    assert after > before, f"distance did not increase ({before:.4g} -> {after:.4g})"
    return f"before={before:.4g}, after={after:.4g} (x{after / before:.3f})"


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 9)}


def _record(i):
    t0 = time.perf_counter()
    try:
        detail = CRITERIA[i]()
    except AssertionError as exc:
        RESULTS[i] = ("FAIL", str(exc), time.perf_counter() - t0)
        raise
    RESULTS[i] = ("PASS", detail, time.perf_counter() - t0)
    return RESULTS[i]


@pytest.mark.parametrize("i", sorted(CRITERIA))
def test_criterion(i):
    status, detail, elapsed = _record(i)
    print(f"criterion {i} {status} ({elapsed:.1f}s): {detail}")
    assert elapsed <= 60.0, f"criterion {i} took {elapsed:.1f}s"


def test_criterion_9():
    RESULTS[9] = ("SKIPPED", "published processed meshes are not available", 0.0)
    pytest.skip("criterion 9 needs the published processed shadow-surface meshes")


def summary_lines():
    lines = []
    for i in range(1, 10):
        status, detail, _ = RESULTS.get(i, ("NOT RUN", "", 0.0))
        lines.append(f"ACCEPTANCE {i} {status}: {TITLES[i]}" + (f" [{detail}]" if detail else ""))
    return lines


if __name__ == "__main__":
    failed = False
    for i in sorted(CRITERIA):
        try:
            _record(i)
        except AssertionError:
            failed = True
    RESULTS[9] = ("SKIPPED", "published processed meshes are not available", 0.0)
    print("\n".join(summary_lines()))
    sys.exit(1 if failed else 0)
