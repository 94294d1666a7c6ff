"""Least-squares recovery of vertex positions from per-face Jacobians.

Given a target 3x3 matrix per face, the vertices minimizing the
area-weighted mismatch between the per-face gradients of the embedding
and the prescribed matrices solve the sparse normal equations
``(G^T M G) x = G^T M b``. The stiffness matrix ``G^T M G`` is the
cotangent Laplacian; it is factorized once per rest mesh (one pinned
vertex removes the translational null space) and reused by every solve
and adjoint solve. Solutions are re-anchored so their centroid matches
the rest centroid, making the output independent of the pinned vertex.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .mesh import FaceOperators, JacobianField, TriMesh

_PINNED = 0  # vertex eliminated from the normal equations


def _count_components(mesh: TriMesh) -> int:
    f = mesh.faces
    i = f[:, [0, 1, 2]].reshape(-1)
    j = f[:, [1, 2, 0]].reshape(-1)
    n = mesh.n_vertices
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    return csgraph.connected_components(adj, directed=False, return_labels=False)


def _stack_rows(matrices: np.ndarray) -> np.ndarray:
    """(M, 3, 3) field -> (3M, 3) right-hand side, column r = coordinate r."""
    return np.ascontiguousarray(np.swapaxes(matrices, 1, 2).reshape(-1, 3))


def _unstack_rows(stacked: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(stacked.reshape(-1, 3, 3), 1, 2))


class PoissonSystem:
    """Prefactorized normal equations bound to one rest mesh.

    Create through :func:`build_system`. Immutable after construction;
    `solve` and `solve_adjoint` are pure and safe to call concurrently.
    """

    def __init__(self, mesh: TriMesh, ops: FaceOperators):
        n_comp = _count_components(mesh)
        if n_comp != 1:
            raise ValueError(
                f"mesh has {n_comp} components; the solve anchors only one")
        self.mesh = mesh
        self.ops = ops
        g = ops.gradient.tocsc()
        area3 = np.repeat(ops.areas, 3)
        self.rhs_operator = (g.T @ sparse.diags(area3)).tocsr()   # G^T M
        self.stiffness = (self.rhs_operator @ g).tocsr()          # G^T M G
        self.rest_centroid = mesh.vertices.mean(axis=0)
        keep = np.arange(mesh.n_vertices) != _PINNED
        reduced = self.stiffness[keep][:, keep].tocsc()
        try:
            self._factor = splu(reduced)
        except RuntimeError as exc:
            raise ValueError(f"stiffness factorization failed: {exc}") from exc
        self._keep = keep

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_faces(self) -> int:
        return self.mesh.n_faces

    def _matrices(self, jacobians) -> np.ndarray:
        mats = jacobians.matrices if isinstance(jacobians, JacobianField) else np.asarray(jacobians, dtype=np.float64)
        if mats.shape != (self.n_faces, 3, 3):
            raise ValueError(
                f"Jacobian field shape {mats.shape} does not match "
                f"({self.n_faces}, 3, 3)")
        return mats

    def solve(self, jacobians) -> np.ndarray:
        """Vertex positions (N, 3) best matching the prescribed field."""
        mats = self._matrices(jacobians)
        rhs = self.rhs_operator @ _stack_rows(mats)               # (N, 3)
        x = np.zeros((self.n_vertices, 3))
        x[self._keep] = self._factor.solve(rhs[self._keep])
        x += self.rest_centroid - x.mean(axis=0)
        return x

    def solve_adjoint(self, grad_vertices) -> np.ndarray:
        """Pull a vertex-space gradient back to the Jacobian field.

        The solve is linear in the field, ``x = S vec(J) + const``, so
        this returns ``S^T grad`` as an (M, 3, 3) array: one symmetric
        factorized solve followed by application of ``M G``.
        """
        grad = np.asarray(grad_vertices, dtype=np.float64)
        if grad.shape != (self.n_vertices, 3):
            raise ValueError(
                f"gradient shape {grad.shape} does not match "
                f"({self.n_vertices}, 3)")
        y = grad - grad.mean(axis=0)              # adjoint of re-centering
        z = np.zeros_like(y)
        z[self._keep] = self._factor.solve(y[self._keep])
        w = self.rhs_operator.T @ z               # M G z, shape (3M, 3)
        return _unstack_rows(w)


def build_system(mesh: TriMesh, ops: FaceOperators) -> PoissonSystem:
    """Assemble and factorize the normal equations for one rest mesh."""
    if ops.mesh is not mesh:
        raise ValueError("operators were built from a different mesh")
    return PoissonSystem(mesh, ops)


# ---------------------------------------------------------------------------
# Jacobian-field checkpoint format: little-endian binary with a face-count
# header, one row-major 3x3 float64 block per face.

_JAC_MAGIC = b"JACF"
_JAC_VERSION = 1


def save_jacobian_field(field: JacobianField) -> bytes:
    mats = field.matrices if isinstance(field, JacobianField) else np.asarray(field)
    head = _JAC_MAGIC + struct.pack("<II", _JAC_VERSION, mats.shape[0])
    return head + np.ascontiguousarray(mats, dtype="<f8").tobytes()


def load_jacobian_field(data: bytes, expected_faces: int | None = None) -> JacobianField:
    if len(data) < 12 or data[:4] != _JAC_MAGIC:
        raise ValueError("not a Jacobian-field blob")
    version, count = struct.unpack("<II", data[4:12])
    if version != _JAC_VERSION:
        raise ValueError(f"unsupported Jacobian-field version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=12)
    if body.size != count * 9:
        raise ValueError(
            f"Jacobian-field blob truncated: {body.size} values for {count} faces")
    if expected_faces is not None and count != expected_faces:
        raise ValueError(
            f"Jacobian-field has {count} faces, mesh has {expected_faces}")
    return JacobianField(body.reshape(count, 3, 3).copy())
