"""Mesh I/O, Procrustes alignment, sphere fitting and synthetic data."""
import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcoords import ReferenceMesh, TriangleMesh, decode
from .errors import ConfigError, MeshError, MeshFormatError
from .manifold import hat
from .stats import LabeledSample


# ---------------------------------------------------------------------------
# I/O

def load_mesh(path):
    """Read a triangle mesh from an OBJ or PLY file (positions only)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "r", encoding="utf-8") as fh:
            return _read_obj(fh)
    if suffix == ".ply":
        with open(path, "rb") as fh:
            return _read_ply(fh)
    raise MeshFormatError(f"unsupported mesh format {suffix!r}")


def save_mesh(mesh, path):
    """Write OBJ or ASCII PLY; coordinates are written losslessly."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    elif suffix == ".ply":
        lines = ["ply", "format ascii 1.0",
                 f"element vertex {mesh.n_vertices}",
                 "property double x", "property double y", "property double z",
                 f"element face {mesh.n_faces}",
                 "property list uchar int vertex_indices", "end_header"]
        lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    else:
        raise MeshFormatError(f"unsupported mesh format {suffix!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_obj(fh):
    verts, faces = [], []
    for lineno, raw in enumerate(fh, 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex record", lineno) from None
            if len(verts[-1]) != 3:
                raise MeshFormatError("vertex needs three coordinates", lineno)
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshFormatError("only triangular faces are supported", lineno)
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise MeshFormatError("bad face record", lineno) from None
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(idx)
    if not faces:
        raise MeshFormatError("mesh has no faces")
    return TriangleMesh(np.array(verts, dtype=float), np.array(faces))


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply(fh):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError("not a PLY file", 1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshFormatError("unterminated PLY header", lineno)
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", lineno)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}")
    data = {}
    for name, count, props in elements:
        if fmt == "ascii":
            rows, lineno = _ply_ascii_rows(fh, count, props, lineno)
        else:
            rows = _ply_binary_rows(fh, count, props)
        data[name] = (props, rows)
    if "vertex" not in data or "face" not in data or not data["face"][1]:
        raise MeshFormatError("mesh has no faces")
    vprops, vrows = data["vertex"]
    names = [p[0] for p in vprops]
    try:
        cols = [names.index(c) for c in "xyz"]
    except ValueError:
        raise MeshFormatError("vertex element lacks x, y, z") from None
    verts = np.array([[r[c] for c in cols] for r in vrows], dtype=float)
    fprops, frows = data["face"]
    li = next((i for i, p in enumerate(fprops) if p[1] == "list"), None)
    if li is None:
        raise MeshFormatError("face element lacks a vertex index list")
    faces = [r[li] for r in frows]
    if any(len(f) != 3 for f in faces):
        raise MeshFormatError("only triangular faces are supported")
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def _ply_ascii_rows(fh, count, props, lineno):
    rows = []
    for _ in range(count):
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise MeshFormatError("unexpected end of file", lineno)
        tok = raw.split()
        row, k = [], 0
        try:
            for p in props:
                if p[1] == "list":
                    n = int(tok[k])
                    row.append([int(x) for x in tok[k + 1:k + 1 + n]])
                    k += 1 + n
                else:
                    row.append(float(tok[k]))
                    k += 1
        except (ValueError, IndexError):
            raise MeshFormatError("malformed element record", lineno) from None
        rows.append(row)
    return rows, lineno


def _ply_binary_rows(fh, count, props):
    rows = []
    for _ in range(count):
        row = []
        for p in props:
            if p[1] == "list":
                cfmt, ifmt = "<" + _PLY_TYPES[p[2]], _PLY_TYPES[p[3]]
                n = struct.unpack(cfmt, _read_exact(fh, struct.calcsize(cfmt)))[0]
                fmt = f"<{n}{ifmt}"
                row.append(list(struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))))
            else:
                fmt = "<" + _PLY_TYPES[p[1]]
                row.append(struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))[0])
        rows.append(row)
    return rows


def _read_exact(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise MeshFormatError(f"unexpected end of binary data at offset {fh.tell()}")
    return b


# ---------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = ("id", "mesh_path", "group", "latitude")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    mesh_path: str
    group: str
    latitude: float = None

    @property
    def labeled(self):
        return self.latitude is not None


def read_manifest(path, check_paths=True):
    """Rows of a ``id,mesh_path,group,latitude`` CSV.

    Relative mesh paths are resolved against the manifest's directory.  An
    empty latitude marks a sample of unknown parameter (a prediction query).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot open manifest: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in MANIFEST_COLUMNS):
            raise ConfigError(f"manifest header must contain {','.join(MANIFEST_COLUMNS)}")
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, 2):
            rid = (rec["id"] or "").strip()
            if not rid or rid in seen:
                raise ConfigError(f"manifest line {lineno}: missing or duplicate id {rid!r}")
            seen.add(rid)
            lat = (rec["latitude"] or "").strip()
            if lat:
                try:
                    lat = float(lat)
                except ValueError:
                    raise ConfigError(f"manifest line {lineno}: bad latitude {lat!r}") from None
                if not math.isfinite(lat):
                    raise ConfigError(f"manifest line {lineno}: latitude must be finite")
            else:
                lat = None
            mp = Path(rec["mesh_path"].strip())
            if not mp.is_absolute():
                mp = path.parent / mp
            if check_paths and not mp.exists():
                raise ConfigError(f"manifest line {lineno}: mesh not found: {mp}")
            rows.append(ManifestRow(rid, str(mp), (rec["group"] or "").strip(), lat))
    return rows


def write_manifest(rows, path):
    """Write ``rows`` as CSV.

    Absolute mesh paths are stored relative to the manifest's directory when
    possible; relative paths are written unchanged (they are already read
    relative to that directory).
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            mp = str(r.mesh_path)
            if os.path.isabs(mp):
                try:
                    mp = os.path.relpath(mp, path.parent.resolve())
                except ValueError:
                    pass
            w.writerow([r.id, mp, r.group, "" if r.latitude is None else repr(float(r.latitude))])


# ---------------------------------------------------------------------------
# Procrustes

def _normalize_configuration(X):
    X = X - X.mean(axis=0)
    size = np.linalg.norm(X)
    if size == 0:
        raise MeshError("mesh has zero size")
    return X / size


def _rotation_onto(X, Y):
    """Rotation R minimising ||X R - Y|| with det(R) = +1."""
    U, _, Vt = np.linalg.svd(X.T @ Y)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


@dataclass
class AlignmentInfo:
    iterations: int
    objective: list
    mean: np.ndarray


def procrustes_align(meshes, tol=1e-10, max_iter=100, return_info=False):
    """Generalised Procrustes alignment of corresponded meshes.

    Each mesh is centered and scaled to unit centroid size, then all are
    rotated repeatedly onto their evolving mean.  The global rotation is
    fixed by aligning the final mean with the average of the normalized
    inputs, so re-aligning an aligned set is a no-op.
    """
    meshes = list(meshes)
    if not meshes:
        raise ValueError("procrustes_align needs at least one mesh")
    n = meshes[0].n_vertices
    if any(m.n_vertices != n for m in meshes):
        raise MeshError("meshes are not in correspondence")
    Xs = [_normalize_configuration(m.vertices) for m in meshes]
    mean = Xs[0]
    aligned = Xs
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        aligned = [X @ _rotation_onto(X, mean) for X in Xs]
        new_mean = np.mean(aligned, axis=0)
        history.append(float(sum(np.sum((A - new_mean) ** 2) for A in aligned)))
        move = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if move <= tol:
            break
    target = np.mean(Xs, axis=0)
    if np.linalg.norm(target) > 1e-8:
        G = _rotation_onto(mean, target)
        aligned = [A @ G for A in aligned]
        mean = mean @ G
    out = [TriangleMesh(A, m.faces) for A, m in zip(aligned, meshes)]
    return (out, AlignmentInfo(it, history, mean)) if return_info else out


def align_to(mesh, target):
    """Center, unit-scale and rotate ``mesh`` onto the configuration ``target``."""
    X = _normalize_configuration(mesh.vertices)
    return TriangleMesh(X @ _rotation_onto(X, np.asarray(target, dtype=float)), mesh.faces)


# ---------------------------------------------------------------------------
# sphere fitting

@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    rms_residual: float
    iterations: int = 0


def sphere_fit(points, max_iter=100):
    """Sphere minimising the sum of squared distances to ``points``.

    Algebraic initialisation, then Gauss-Newton on the center with the
    optimal radius (mean distance) eliminated.
    """
    V = points.vertices if isinstance(points, TriangleMesh) else np.asarray(points, dtype=float)
    if V.ndim != 2 or V.shape[1] != 3 or len(V) < 4:
        raise MeshError("sphere fit needs at least four 3-D points")
    diag = float(np.linalg.norm(V.max(axis=0) - V.min(axis=0)))
    sv = np.linalg.svd(V - V.mean(axis=0), compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise MeshError("points are coplanar; sphere fit is ill-posed")
    A = np.hstack([2 * V, np.ones((len(V), 1))])
    sol = np.linalg.lstsq(A, np.sum(V ** 2, axis=1), rcond=None)[0]
    c = sol[:3]
    it = 0
    for it in range(1, max_iter + 1):
        d = V - c
        rho = np.linalg.norm(d, axis=1)
        u = d / rho[:, None]
        res = rho - rho.mean()
        J = -(u - u.mean(axis=0))
        step = np.linalg.lstsq(J, -res, rcond=None)[0]
        c = c + step
        if np.linalg.norm(step) <= 1e-10 * diag:
            break
    rho = np.linalg.norm(V - c, axis=1)
    r = float(rho.mean())
    return SphereFit(c, r, float(np.sqrt(np.mean((rho - r) ** 2))), it)


# ---------------------------------------------------------------------------
# synthetic data

def trough_mesh(nu=20, nv=11, length=2.0, width=1.0, depth=0.35, warp=0.3):
    """Doubly curved open surface on a (nu x nv) grid.

    The centre row ``v = 0`` lies on the x axis, so rotating the half with
    ``y > 0`` about that axis is a rigid fold (see :func:`fold_trend`).
    """
    if nv % 2 == 0:
        raise ValueError("nv must be odd so that the grid has a centre row")
    u = np.linspace(-length / 2, length / 2, nu)
    v = np.linspace(-width / 2, width / 2, nv)
    U, W = np.meshgrid(u, v, indexing="ij")
    Z = depth * W ** 2 * (1 + warp * U ** 2)
    verts = np.stack([U, W, Z], axis=-1).reshape(-1, 3)
    idx = np.arange(nu * nv).reshape(nu, nv)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(verts, faces)


def fold_trend(ref, angle, axis=(1.0, 0.0, 0.0), side=(0.0, 1.0, 0.0)):
    """Tangent at the identity that folds part of ``ref`` about a line.

    Faces whose vertices all satisfy ``x . side >= 0`` (with one strictly
    positive) rotate by ``angle`` about ``axis`` through the origin.  The fold
    is realisable by a mesh when the hinge vertices lie on that axis.
    """
    mesh = ref.mesh if isinstance(ref, ReferenceMesh) else ref
    s = mesh.vertices[mesh.faces] @ np.asarray(side, dtype=float)
    moving = np.all(s >= -1e-12, axis=1) & np.any(s > 1e-12, axis=1)
    ax = np.asarray(axis, dtype=float)
    omega = np.zeros((mesh.n_faces, 3))
    omega[moving] = angle * ax / np.linalg.norm(ax)
    return (hat(omega), np.zeros((mesh.n_faces, 3, 3)))


@dataclass
class ShapeDataset:
    samples: list
    meshes: list
    noise: list = field(repr=False)
    base: object = field(repr=False)
    trend: object = field(repr=False)


def synthesize_dataset(ref, trend, noise_scale, params, seed, base=None, group="synthetic",
                       space=None, decode_meshes=True):
    """Samples scattered around the geodesic ``t -> exp(base, t * trend)``.

    Row ``i`` draws tangent noise at ``base`` from a generator seeded with
    ``(seed, i)``, transports it to the curve point and maps it back with the
    exponential.  ``noise_scale = 0`` places samples exactly on the geodesic.
    """
    space = space or ref.shape_space()
    base = space.identity() if base is None else base
    samples, meshes, noise = [], [], []
    for i, t in enumerate(params):
        rng = np.random.default_rng([seed, i])
        g = space.exp(base, space.scale(trend, float(t)))
        eps = space.random_tangent(base, rng, noise_scale)
        x = space.exp(g, space.transport(base, g, eps))
        samples.append(LabeledSample(x, float(t), group, f"{group}-{i:03d}"))
        noise.append(eps)
        if decode_meshes:
            meshes.append(decode(x, ref))
    return ShapeDataset(samples, meshes, noise, base, trend)
