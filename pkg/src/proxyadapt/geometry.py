"""Small-scale convex geometry on the probability simplex.

Pseudoinverse and kernel via SVD, vertex enumeration of slices
``{s : A s = b, sum(s) = 1, s >= 0}``, fan triangulation, simplex
volumes and volume-weighted polytope centroids. Everything here is
exact enough for ambient dimension up to ~10; nothing is meant to scale.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from proxyadapt.errors import InternalConsistencyError, InvalidInputError

RANK_TOL = 1e-10
FEAS_TOL = 1e-9
DEDUP_TOL = 1e-9


def _as_finite_matrix(M) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        raise InvalidInputError("matrix is empty")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError("matrix has non-finite entries")
    return M


def numerical_rank(M, rank_tol: float = RANK_TOL) -> int:
    M = _as_finite_matrix(M)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rank_tol * s[0]))


def pseudoinverse(M, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff.

    Singular values below ``rank_tol * s_max`` are treated as zero.
    """
    if rank_tol <= 0:
        raise InvalidInputError("rank_tol must be positive")
    M = _as_finite_matrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = s > rank_tol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def kernel_basis(M, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the null space of ``M``, one vector per column."""
    if rank_tol <= 0:
        raise InvalidInputError("rank_tol must be positive")
    M = _as_finite_matrix(M)
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.sum(s > rank_tol * s[0]))
    return Vt[r:].T.copy()


def row_space_basis(M, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the row space of ``M``."""
    M = _as_finite_matrix(M)
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((0, M.shape[1]))
    r = int(np.sum(s > rank_tol * s[0]))
    return Vt[:r].copy()


def as_simplex_point(p, tol: float = 1e-12) -> np.ndarray:
    """Validate and clean a point of the simplex (tiny negatives clamped to 0)."""
    p = np.asarray(p, dtype=float).ravel()
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("simplex point has non-finite coordinates")
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise InvalidInputError(f"not a point of the simplex: {p}")
    return np.clip(p, 0.0, None)


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex.

    Sorting-based algorithm; works on a single vector or a 2-D stack of rows.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = np.atleast_2d(v)
    n = V.shape[1]
    u = -np.sort(-V, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1.0)
    out = np.maximum(V - theta[:, None], 0.0)
    # renormalise away the last ulp of drift
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


def dedup_points(points, tol: float = DEDUP_TOL) -> np.ndarray:
    """Drop points within ``tol`` (inf-norm) of an earlier point; keeps first seen."""
    kept: list[np.ndarray] = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in kept):
            kept.append(np.asarray(p, dtype=float))
    if not kept:
        return np.zeros((0, 0))
    return np.vstack(kept)


def affine_dimension(points, tol: float = 1e-9) -> int:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] <= 1:
        return 0
    E = P[1:] - P[0]
    if np.max(np.abs(E)) <= tol:
        return 0
    s = np.linalg.svd(E, compute_uv=False)
    return int(np.sum(s > tol))


@dataclass(frozen=True)
class PolytopeSlice:
    """Vertex description of ``{s : A s = b, sum(s) = 1, s >= 0}``."""

    vertices: np.ndarray
    constraint: np.ndarray
    rhs: np.ndarray
    intrinsic_dim: int = field(default=0)

    @property
    def ambient_dim(self) -> int:
        return self.vertices.shape[1]

    def satisfies(self, s, tol: float = FEAS_TOL) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(
            np.all(s >= -tol)
            and abs(s.sum() - 1.0) <= tol
            and np.max(np.abs(self.constraint @ s - self.rhs), initial=0.0) <= tol
        )


def slice_vertices(constraint, rhs, rank_tol: float = RANK_TOL) -> PolytopeSlice:
    """All vertices of ``{s : constraint @ s = rhs, sum(s) = 1, s >= 0}``.

    The equality system is first reduced to an orthonormal set of
    independent rows (its row space). A vertex is a basic feasible
    solution: pick ``r`` support coordinates whose columns are independent,
    set the rest to zero and solve the square system.
    """
    A = _as_finite_matrix(constraint)
    b = np.asarray(rhs, dtype=float).ravel()
    if b.shape[0] != A.shape[0]:
        raise InvalidInputError("rhs length does not match constraint rows")
    n = A.shape[1]
    E = np.vstack([A, np.ones((1, n))])
    f = np.concatenate([b, [1.0]])

    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    r = int(np.sum(s > rank_tol * s[0]))
    # reduced system R x = g with orthonormal rows; consistent iff the
    # component of f outside the column space of E is negligible
    U = U[:, :r]
    if np.linalg.norm(U @ (U.T @ f) - f) > 1e-8 * max(1.0, np.linalg.norm(f)):
        return PolytopeSlice(np.zeros((0, n)), A, b, -1)
    R = Vt[:r]
    g = (U.T @ f) / s[:r]

    found = []
    for support in itertools.combinations(range(n), r):
        sub = R[:, support]
        sv = np.linalg.svd(sub, compute_uv=False)
        if sv[-1] <= 1e-9:
            continue
        x = np.zeros(n)
        x[list(support)] = np.linalg.solve(sub, g)
        if np.all(x >= -FEAS_TOL) and np.max(np.abs(E @ x - f)) <= FEAS_TOL:
            found.append(np.clip(x, 0.0, None))
    if not found:
        return PolytopeSlice(np.zeros((0, n)), A, b, -1)
    verts = dedup_points(found)
    order = np.lexsort(verts.T[::-1])
    verts = verts[order]
    return PolytopeSlice(verts, A, b, affine_dimension(verts))


def enumerate_slice_vertices(c, constraint, rank_tol: float = RANK_TOL) -> PolytopeSlice:
    """Vertices of the simplex slice through ``c`` along ``Ker(constraint)``."""
    c = as_simplex_point(c)
    A = _as_finite_matrix(constraint)
    if A.shape[1] != c.shape[0]:
        raise InvalidInputError("constraint must have len(c) columns")
    sl = slice_vertices(A, A @ c, rank_tol)
    if sl.vertices.shape[0] == 0:
        raise InternalConsistencyError("slice through a simplex point came out empty")
    return sl


def _affine_frame(points: np.ndarray, tol: float = 1e-9):
    """Origin and orthonormal basis (rows) of the affine hull of ``points``."""
    origin = points[0]
    E = points[1:] - origin
    if E.shape[0] == 0:
        return origin, np.zeros((0, points.shape[1]))
    _, s, Vt = np.linalg.svd(E, full_matrices=False)
    k = int(np.sum(s > tol))
    return origin, Vt[:k]


def simplex_volume(verts) -> float:
    """Intrinsic ``J``-volume of the simplex spanned by ``J+1`` points.

    Edges from the first vertex are expressed in an orthonormal basis of
    their span and the volume is ``|det| / J!``. Degenerate input gives 0.
    """
    P = np.atleast_2d(np.asarray(verts, dtype=float))
    J = P.shape[0] - 1
    if J <= 0:
        return 0.0
    E = P[1:] - P[0]
    if J > E.shape[1]:
        return 0.0
    # QR of the edge matrix: |det R| is the volume of the parallelotope
    R = np.linalg.qr(E.T, mode="r")
    vol = abs(float(np.prod(np.diag(R)))) / math.factorial(J)
    scale = float(np.prod(np.linalg.norm(E, axis=1))) / math.factorial(J)
    if vol <= 1e-13 * max(scale, 1e-300):
        return 0.0
    return vol


def _facets(coords: np.ndarray, tol: float = 1e-9) -> list[tuple[int, ...]]:
    """Facets of a full-dimensional point set in R^J, as sorted vertex-index tuples.

    Brute force: every affinely independent J-subset spans a candidate
    hyperplane; it supports a facet when all points lie on one side.
    """
    m, J = coords.shape
    seen: set[tuple[int, ...]] = set()
    out = []
    for subset in itertools.combinations(range(m), J):
        P = coords[list(subset)]
        if J == 1:
            normal = np.ones(1)
        else:
            E = P[1:] - P[0]
            _, s, Vt = np.linalg.svd(E, full_matrices=True)
            if s.size < J - 1 or s[-1] <= tol:
                continue
            normal = Vt[-1]
        offset = normal @ P[0]
        side = coords @ normal - offset
        if np.all(side <= tol) or np.all(side >= -tol):
            face = tuple(int(i) for i in np.flatnonzero(np.abs(side) <= tol))
            if face not in seen:
                seen.add(face)
                out.append(face)
    return out


def _triangulate(points: np.ndarray, idx: tuple[int, ...], base: int | None = None) -> list[tuple[int, ...]]:
    """Fan triangulation of conv(points[idx]); returns simplices as index tuples."""
    sub = points[list(idx)]
    origin, basis = _affine_frame(sub)
    J = basis.shape[0]
    if J == 0:
        return [(idx[0],)]
    coords = (sub - origin) @ basis.T
    if J == 1:
        lo, hi = int(np.argmin(coords[:, 0])), int(np.argmax(coords[:, 0]))
        return [(idx[lo], idx[hi])]
    apex_local = 0 if base is None else idx.index(base)
    simplices = []
    for face in _facets(coords):
        if apex_local in face:
            continue
        face_idx = tuple(idx[i] for i in face)
        for tri in _triangulate(points, face_idx):
            simplices.append((idx[apex_local],) + tri)
    return simplices


def triangulate(points, base: int = 0) -> list[tuple[int, ...]]:
    """Triangulate the convex hull of ``points`` by coning from vertex ``base``."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    return _triangulate(P, tuple(range(P.shape[0])), base)


def polytope_centroid(sl, base: int = 0) -> np.ndarray:
    """Volume-weighted centroid of a slice (or of a raw vertex array).

    Points and segments are handled directly; higher-dimensional slices are
    fan-triangulated from vertex ``base`` and each simplex contributes its
    vertex mean weighted by its intrinsic volume.
    """
    verts = sl.vertices if isinstance(sl, PolytopeSlice) else np.atleast_2d(np.asarray(sl, dtype=float))
    if verts.size == 0 or verts.shape[0] == 0:
        raise InvalidInputError("cannot take the centroid of an empty slice")
    dim = affine_dimension(verts)
    if dim == 0:
        return verts[0].copy()
    if dim == 1:
        origin, basis = _affine_frame(verts)
        t = (verts - origin) @ basis[0]
        return 0.5 * (verts[np.argmin(t)] + verts[np.argmax(t)])
    total = 0.0
    acc = np.zeros(verts.shape[1])
    for simplex in triangulate(verts, base):
        pts = verts[list(simplex)]
        vol = simplex_volume(pts)
        total += vol
        acc += vol * pts.mean(axis=0)
    if total <= 0.0:
        raise InternalConsistencyError("triangulation has zero total volume")
    return acc / total
