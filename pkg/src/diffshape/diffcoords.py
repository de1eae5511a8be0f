"""Differential coordinates of corresponded triangle meshes.

A mesh is encoded relative to a reference mesh by the per-face deformation
gradients ``G_j`` mapping reference frames onto subject frames, split by polar
decomposition into a rotation and a symmetric stretch.  Decoding solves a
sparse area-weighted least-squares problem for vertex positions whose edges
best match the edges predicted by the coordinates.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DegenerateFaceError, MeshError, OrientationError
from .manifold import SO3, SPD, Product, sym
from .stats import frechet_mean

#: Faces with area below this fraction of the squared bounding-box diagonal are degenerate.
DEGENERATE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise MeshError(f"faces must have shape (m, 3) with m > 0, got {f.shape}")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def centered(self):
        return TriangleMesh(self.vertices - self.vertices.mean(axis=0), self.faces)

    def transformed(self, R=None, t=None, scale=1.0):
        v = self.vertices * scale
        if R is not None:
            v = v @ np.asarray(R).T
        if t is not None:
            v = v + t
        return TriangleMesh(v, self.faces)


class DifferentialCoords(NamedTuple):
    """Per-face rotations ``(m, 3, 3)`` and SPD stretches ``(m, 3, 3)``."""

    rotations: np.ndarray
    stretches: np.ndarray

    @classmethod
    def identity(cls, m):
        eye = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
        return cls(eye, eye.copy())


class ShapeSpace(Product):
    """Product manifold (SO(3) x Sym+(3))^m of differential coordinates.

    ``rotation_weight`` and ``stretch_weight`` scale the two factors of the
    product metric; ``face_weights`` (e.g. reference face areas) scale each
    face.  All default to one.
    """

    def __init__(self, m, rotation_weight=1.0, stretch_weight=1.0, face_weights=None):
        w = 1.0 if face_weights is None else np.asarray(face_weights, dtype=float)
        if np.ndim(w) and np.shape(w) != (m,):
            raise MeshError("face_weights must have one entry per face")
        super().__init__([SO3(m, w), SPD(m, w)], (rotation_weight, stretch_weight))
        self.m = m

    def _pack(self, components):
        return DifferentialCoords(*components)

    def identity(self):
        return DifferentialCoords.identity(self.m)


def face_frames(vertices, faces):
    """Frames ``[e1 | e2 | n]`` of all faces, shape ``(m, 3, 3)``."""
    v = np.asarray(vertices, dtype=float)[faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c, axis=1)
    diag = np.linalg.norm(np.ptp(np.asarray(vertices, dtype=float), axis=0))
    bad = np.flatnonzero(0.5 * cn <= DEGENERATE_AREA * diag ** 2)
    if bad.size:
        raise DegenerateFaceError(
            f"{bad.size} degenerate face(s), first: {bad[:10].tolist()}", bad)
    return np.stack([e1, e2, c / cn[:, None]], axis=2)


def face_frame(mesh, face_index):
    return face_frames(mesh.vertices, mesh.faces[[face_index]])[0]


def polar(G):
    """Polar decomposition ``G = R U`` of a batch of matrices via SVD."""
    W, S, Vt = np.linalg.svd(G)
    d = np.sign(np.linalg.det(W @ Vt))
    S = S.copy()
    S[..., 2] *= d
    W = W.copy()
    W[..., :, 2] *= d[..., None]
    R = W @ Vt
    U = sym((np.swapaxes(Vt, -1, -2) * S[..., None, :]) @ Vt)
    return R, U


@dataclass(frozen=True, eq=False)
class ReferenceMesh:
    """Reference mesh with cached frames and a prefactored reconstruction solver."""

    mesh: TriangleMesh
    frames: np.ndarray = field(init=False, repr=False)
    frames_inv: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mesh = self.mesh
        F = face_frames(mesh.vertices, mesh.faces)
        cond = np.linalg.cond(F)
        if np.any(cond >= 1e8):
            raise DegenerateFaceError("ill-conditioned reference face frames",
                                      np.flatnonzero(cond >= 1e8))
        object.__setattr__(self, "frames", F)
        object.__setattr__(self, "frames_inv", np.linalg.inv(F))
        object.__setattr__(self, "areas", mesh.face_areas())
        self._build_solver()

    @property
    def n_faces(self):
        return self.mesh.n_faces

    def shape_space(self, rotation_weight=1.0, stretch_weight=1.0, area_weighted=False):
        fw = self.areas / self.areas.mean() if area_weighted else None
        return ShapeSpace(self.n_faces, rotation_weight, stretch_weight, fw)

    def _build_solver(self):
        f = self.mesh.faces
        n, m = self.mesh.n_vertices, len(f)
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        adj = sp.coo_matrix((np.ones(3 * m), (f.ravel(), np.roll(f, 1, axis=1).ravel())),
                            shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        if not used.all() or ncomp != 1:
            raise MeshError("reconstruction system is singular: mesh is "
                            "disconnected or has unreferenced vertices")
        rows = np.repeat(np.arange(2 * m), 2)
        cols = np.stack([f[:, 1], f[:, 0], f[:, 2], f[:, 0]], axis=1).ravel()
        vals = np.tile([1.0, -1.0], 2 * m)
        D = sp.csr_matrix((vals, (rows, cols)), shape=(2 * m, n))
        w = np.repeat(self.areas, 2)
        DtW = (D.T @ sp.diags(w)).tocsr()
        L = (DtW @ D).tocsc()
        object.__setattr__(self, "_DtW", DtW)
        object.__setattr__(self, "_L", L)
        object.__setattr__(self, "_lu", splu(L[1:, 1:].tocsc()))

    def solve_edges(self, targets):
        """Vertex positions whose edges best fit ``targets`` (shape ``(2m, 3)``).

        The translation gauge is fixed by centering the vertices at the origin.
        """
        rhs = self._DtW @ targets
        x = np.zeros((self.mesh.n_vertices, 3))
        x[1:] = self._lu.solve(rhs[1:])
        # one step of iterative refinement
        r = rhs - self._L @ x
        x[1:] += self._lu.solve(r[1:])
        return x - x.mean(axis=0)


def encode(mesh, ref):
    """Differential coordinates of ``mesh`` relative to ``ref``."""
    if mesh.n_vertices != ref.mesh.n_vertices or mesh.n_faces != ref.n_faces:
        raise MeshError("mesh is not in correspondence with the reference "
                        f"({mesh.n_vertices}/{mesh.n_faces} vs "
                        f"{ref.mesh.n_vertices}/{ref.n_faces} vertices/faces)")
    if not np.array_equal(mesh.faces, ref.mesh.faces):
        raise MeshError("mesh connectivity differs from the reference")
    G = face_frames(mesh.vertices, mesh.faces) @ ref.frames_inv
    det = np.linalg.det(G)
    bad = np.flatnonzero(det <= 0)
    if bad.size:
        raise OrientationError(
            f"{bad.size} face(s) with non-positive Jacobian determinant, "
            f"first: {bad[:10].tolist()}", bad)
    return DifferentialCoords(*polar(G))


def decode(coords, ref):
    """Triangle mesh realising ``coords`` on the reference connectivity."""
    R, U = coords
    if len(R) != ref.n_faces or len(U) != ref.n_faces:
        raise MeshError("coordinate count does not match the reference face count")
    G = R @ U
    E = G @ ref.frames[:, :, :2]
    targets = np.swapaxes(E, 1, 2).reshape(-1, 3)
    return TriangleMesh(ref.solve_edges(targets), ref.mesh.faces)


@dataclass
class ReferenceInfo:
    iterations: int
    updates: list


def compute_reference(meshes, tol=1e-6, max_iter=20, space_options=None,
                      return_info=False):
    """Reference mesh approximating the mesh of the data's Fréchet mean.

    Starts from the first mesh; each round encodes all meshes, takes the
    Fréchet mean in shape space and decodes it as the next reference.  Stops
    when the update (distance of the mean from the identity) is at most
    ``tol``, when it stops decreasing, or after ``max_iter`` rounds.
    """
    meshes = list(meshes)
    if not meshes:
        raise ValueError("compute_reference needs at least one mesh")
    space_options = space_options or {}
    ref = ReferenceMesh(meshes[0].centered())
    updates = []
    it = 0
    for it in range(1, max_iter + 1):
        space = ref.shape_space(**space_options)
        coords = [encode(T, ref) for T in meshes]
        mean = frechet_mean(space, coords)
        update = space.distance(space.identity(), mean)
        if updates and update >= updates[-1]:
            it -= 1
            break
        updates.append(update)
        ref = ReferenceMesh(decode(mean, ref))
        if update <= tol:
            break
    return (ref, ReferenceInfo(it, updates)) if return_info else ref
