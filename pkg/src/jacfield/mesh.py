"""Triangle mesh data model, Wavefront OBJ I/O, and discrete face operators.

The mesh is a plain indexed triangle soup with optional UV coordinates
(UVs are carried through unchanged; no texture images are handled).
All geometry is float64. The operators built here (per-face gradients,
face areas, cotangent edge weights) feed every downstream energy and
linear solve.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

# Faces with area at or below this floor are rejected outright.
AREA_FLOOR = 1e-12


class ObjParseError(ValueError):
    """Malformed OBJ input; the message carries the 1-based line number."""


class MeshValidationError(ValueError):
    """Mesh violates a structural invariant (indexing, degeneracy, manifoldness)."""


class TriMesh:
    """An immutable triangle mesh: vertices, faces, optional UV passthrough.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Vertex positions in scene units.
    faces : (M, 3) array_like
        Vertex index triples, 0-based.
    uv : (K, 2) array_like, optional
        Texture coordinates. Carried through I/O only.
    uv_faces : (M, 3) array_like, optional
        Per-face indices into ``uv``; required when ``uv`` is given.

    Raises
    ------
    MeshValidationError
        On out-of-range indices, repeated indices within a face, faces
        below the area floor, or edges shared by more than two faces.
    """

    def __init__(self, vertices, faces, uv=None, uv_faces=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshValidationError(
                f"vertices must have shape (N, 3), got {self.vertices.shape}")
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshValidationError(
                f"faces must have shape (M, 3), got {self.faces.shape}")
        if not np.isfinite(self.vertices).all():
            raise MeshValidationError("non-finite vertex coordinate")

        if uv is None:
            self.uv = None
            self.uv_faces = None
        else:
            self.uv = np.ascontiguousarray(uv, dtype=np.float64)
            if uv_faces is None:
                raise MeshValidationError("uv given without per-face uv indices")
            self.uv_faces = np.ascontiguousarray(uv_faces, dtype=np.int64)
            if self.uv.ndim != 2 or self.uv.shape[1] != 2:
                raise MeshValidationError(
                    f"uv must have shape (K, 2), got {self.uv.shape}")
            if self.uv_faces.shape != self.faces.shape:
                raise MeshValidationError(
                    f"uv_faces shape {self.uv_faces.shape} does not match "
                    f"faces shape {self.faces.shape}")

        self._validate()
        self.vertices.flags.writeable = False
        self.faces.flags.writeable = False
        if self.uv is not None:
            self.uv.flags.writeable = False
            self.uv_faces.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity and UVs over a new vertex array."""
        return TriMesh(vertices, self.faces, uv=self.uv, uv_faces=self.uv_faces)

    def _validate(self):
        n, f = self.n_vertices, self.faces
        if f.size:
            bad = (f < 0) | (f >= n)
            if bad.any():
                i = int(np.argwhere(bad.any(axis=1))[0, 0])
                v = int(f[i][bad[i]][0])
                raise MeshValidationError(
                    f"face {i} references vertex {v} of {n}")
            repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if repeated.any():
                i = int(np.argmax(repeated))
                raise MeshValidationError(f"face {i} repeats a vertex index")
            areas = face_areas(self.vertices, f)
            small = areas <= AREA_FLOOR
            if small.any():
                i = int(np.argmax(small))
                raise MeshValidationError(
                    f"face {i} is degenerate (area {areas[i]:.3e})")
            counts = edge_face_counts(f, n)
            if counts.size and counts.max() > 2:
                raise MeshValidationError(
                    "non-manifold edge shared by more than 2 faces")
        if self.uv is not None and self.uv_faces.size:
            if self.uv_faces.min() < 0 or self.uv_faces.max() >= len(self.uv):
                raise MeshValidationError("uv face index out of range")


def face_areas(vertices, faces) -> np.ndarray:
    """Triangle areas by the cross-product formula, shape (M,)."""
    v0 = vertices[faces[:, 0]]
    cross = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    return 0.5 * np.linalg.norm(cross, axis=1)


def face_normals(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and areas. Normals of near-degenerate faces are zeroed."""
    v0 = vertices[faces[:, 0]]
    cross = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    norm = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norm
    safe = np.where(norm > 0.0, norm, 1.0)
    normals = cross / safe[:, None]
    normals[norm <= 2.0 * AREA_FLOOR] = 0.0
    return normals, areas


def edge_face_counts(faces, n_vertices) -> np.ndarray:
    """Number of faces incident to each undirected edge (CSR data order)."""
    i = faces[:, [0, 1, 2]].reshape(-1)
    j = faces[:, [1, 2, 0]].reshape(-1)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    a = sparse.csr_matrix(
        (np.ones(len(lo)), (lo, hi)), shape=(n_vertices, n_vertices))
    a.sum_duplicates()
    return a.data


@dataclass(frozen=True)
class JacobianField:
    """One 3x3 matrix per face; the deformation variable of every stage.

    ``matrices`` has shape (M, 3, 3), indexed like the faces of the mesh
    the field was built against.
    """

    matrices: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrices, dtype=np.float64)
        if m.ndim != 3 or m.shape[1:] != (3, 3):
            raise ValueError(f"expected (M, 3, 3) matrices, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("non-finite Jacobian entry")
        object.__setattr__(self, "matrices", m)

    @classmethod
    def identity(cls, n_faces: int) -> "JacobianField":
        return cls(np.tile(np.eye(3), (n_faces, 1, 1)))

    def __len__(self) -> int:
        return self.matrices.shape[0]


class FaceOperators:
    """Discrete operators of one rest mesh.

    Attributes
    ----------
    gradient : scipy.sparse.csr_matrix, shape (3M, N)
        Maps a per-vertex scalar to stacked per-face 3D gradients; rows
        3j..3j+2 hold the gradient inside face j.
    areas : (M,) ndarray
        Face areas.
    cot_weights : dict[(int, int), float]
        Symmetric cotangent weight per undirected edge (stored with
        j < k); the single cotangent is halved on boundary edges.
    """

    def __init__(self, mesh: TriMesh, gradient, areas, cot_weights, normals):
        self.mesh = mesh
        self.gradient = gradient
        self.areas = areas
        self.cot_weights = cot_weights
        self.normals = normals

    @cached_property
    def edge_array(self) -> np.ndarray:
        """Undirected edges (E, 2) with j < k, in sorted order."""
        if not self.cot_weights:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(self.cot_weights), dtype=np.int64)

    @cached_property
    def edge_weight_array(self) -> np.ndarray:
        e = self.edge_array
        return np.array([self.cot_weights[(int(a), int(b))] for a, b in e])

    @cached_property
    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(src, dst, w) covering each undirected edge in both directions."""
        e, w = self.edge_array, self.edge_weight_array
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        return src, dst, np.concatenate([w, w])


def build_operators(mesh: TriMesh) -> FaceOperators:
    """Assemble the per-face gradient operator, areas, and cotangent weights.

    The gradient rows follow the linear hat-function formula: for the
    vertex opposite edge (b, c) of face j,
    ``grad = (n x (v_c - v_b)) / (2 |f_j|)`` with n the unit face normal.
    Cotangent weights are ``(cot a + cot b) / 2`` over the faces adjacent
    to each edge, with the lone term halved on boundary edges.
    """
    v, f = mesh.vertices, mesh.faces
    m, n = mesh.n_faces, mesh.n_vertices
    normals, areas = face_normals(v, f)
    if (areas <= AREA_FLOOR).any():
        i = int(np.argmax(areas <= AREA_FLOOR))
        raise MeshValidationError(f"face {i} is degenerate (area {areas[i]:.3e})")

    # Opposite-edge vectors per corner, in cyclic order (a, b, c).
    opp = np.stack([
        v[f[:, 2]] - v[f[:, 1]],
        v[f[:, 0]] - v[f[:, 2]],
        v[f[:, 1]] - v[f[:, 0]],
    ], axis=1)                                   # (M, 3 corners, 3)
    grads = np.cross(normals[:, None, :], opp) / (2.0 * areas)[:, None, None]

    # Entry (j, corner a, component c): G[3j + c, f[j, a]] = grads[j, a, c].
    rows = (3 * np.arange(m))[:, None, None] + np.arange(3)[None, None, :]
    rows = np.broadcast_to(rows, (m, 3, 3))
    cols = np.broadcast_to(f[:, :, None], (m, 3, 3))
    gradient = sparse.csr_matrix(
        (grads.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
        shape=(3 * m, n))

    cot_weights: dict[tuple[int, int], float] = {}
    for corner in range(3):
        b = f[:, (corner + 1) % 3]
        c = f[:, (corner + 2) % 3]
        u = v[b] - v[f[:, corner]]
        w_ = v[c] - v[f[:, corner]]
        cos = np.einsum("ij,ij->i", u, w_)
        sin = np.linalg.norm(np.cross(u, w_), axis=1)
        cot = cos / sin
        for jj in range(m):
            key = (int(min(b[jj], c[jj])), int(max(b[jj], c[jj])))
            cot_weights[key] = cot_weights.get(key, 0.0) + 0.5 * float(cot[jj])

    return FaceOperators(mesh, gradient, areas, cot_weights, normals)


def compute_jacobians(ops: FaceOperators, deformed_vertices) -> JacobianField:
    """Per-face Jacobians of a deformation given by new vertex positions.

    Row r of each 3x3 matrix is the in-face gradient of the r-th
    coordinate of the deformed positions. The gradient only determines
    the map on the face plane; the matrix is completed along the rest
    normal by mapping it to the deformed unit normal scaled with
    ``sqrt(deformed area / rest area)``, so identity, rotations, and
    uniform scalings are reproduced exactly.
    """
    deformed = np.asarray(deformed_vertices, dtype=np.float64)
    mesh = ops.mesh
    if deformed.shape != mesh.vertices.shape:
        raise MeshValidationError(
            f"deformed vertices shape {deformed.shape} does not match "
            f"mesh shape {mesh.vertices.shape}")
    g = ops.gradient @ deformed                   # (3M, 3): [3j+c, r]
    jac = np.swapaxes(g.reshape(mesh.n_faces, 3, 3), 1, 2)
    def_normals, def_areas = face_normals(deformed, mesh.faces)
    scale = np.sqrt(def_areas / ops.areas)
    jac = jac + scale[:, None, None] * def_normals[:, :, None] * ops.normals[:, None, :]
    return JacobianField(jac)


# ---------------------------------------------------------------------------
# Wavefront OBJ I/O


@dataclass
class RawObj:
    """Unvalidated parse result; `cmd_validate` inspects this directly."""
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None
    uv_faces: np.ndarray | None = None
    ignored_records: list[str] = field(default_factory=list)


def _open_source(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb"), True
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(bytes(source)), True
    return source, False


def _resolve_index(raw: int, count: int, what: str, lineno: int) -> int:
    if raw == 0:
        raise ObjParseError(f"line {lineno}: zero {what} index")
    idx = raw - 1 if raw > 0 else count + raw
    return idx


def parse_obj(source) -> RawObj:
    """Lenient OBJ parse: syntax is checked, mesh invariants are not.

    Supports `v`, `vt`, and `f` records with `v`, `v/vt`, `v//vn`, and
    `v/vt/vn` face syntax; polygons are fan-triangulated; negative
    (relative) indices are resolved. Unknown record types are ignored
    with a warning.
    """
    stream, owned = _open_source(source)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    tris: list[list[int]] = []
    uv_tris: list[list[int]] = []
    any_uv = False
    all_uv = True
    ignored: list[str] = []
    seen_ignored: set[str] = set()
    try:
        for lineno, raw_line in enumerate(stream, start=1):
            if isinstance(raw_line, bytes):
                try:
                    line = raw_line.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise ObjParseError(f"line {lineno}: not valid UTF-8") from exc
            else:
                line = raw_line
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kw = parts[0]
            if kw == "v":
                if len(parts) < 4:
                    raise ObjParseError(
                        f"line {lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError as exc:
                    raise ObjParseError(
                        f"line {lineno}: bad vertex coordinate") from exc
            elif kw == "vt":
                if len(parts) < 3:
                    raise ObjParseError(
                        f"line {lineno}: texture record needs 2 coordinates")
                try:
                    uvs.append([float(p) for p in parts[1:3]])
                except ValueError as exc:
                    raise ObjParseError(
                        f"line {lineno}: bad texture coordinate") from exc
            elif kw == "f":
                if len(parts) < 4:
                    raise ObjParseError(
                        f"line {lineno}: face record needs at least 3 vertices")
                vi: list[int] = []
                ti: list[int | None] = []
                for p in parts[1:]:
                    fields = p.split("/")
                    try:
                        v_idx = int(fields[0])
                    except ValueError as exc:
                        raise ObjParseError(
                            f"line {lineno}: bad face index {p!r}") from exc
                    vi.append(_resolve_index(v_idx, len(verts), "vertex", lineno))
                    if len(fields) >= 2 and fields[1]:
                        try:
                            t_idx = int(fields[1])
                        except ValueError as exc:
                            raise ObjParseError(
                                f"line {lineno}: bad texture index {p!r}") from exc
                        ti.append(_resolve_index(t_idx, len(uvs), "texture", lineno))
                    else:
                        ti.append(None)
                has_uv = all(t is not None for t in ti)
                any_uv = any_uv or has_uv
                all_uv = all_uv and has_uv
                for k in range(1, len(vi) - 1):
                    tris.append([vi[0], vi[k], vi[k + 1]])
                    if has_uv:
                        uv_tris.append([ti[0], ti[k], ti[k + 1]])
                    else:
                        uv_tris.append([0, 0, 0])
            elif kw in ("vn", "s", "g", "o", "mtllib", "usemtl", "l", "p"):
                if kw not in seen_ignored:
                    seen_ignored.add(kw)
                    ignored.append(kw)
                    logger.warning("ignoring OBJ record type %r", kw)
            else:
                if kw not in seen_ignored:
                    seen_ignored.add(kw)
                    ignored.append(kw)
                    logger.warning("line %d: ignoring unknown OBJ record %r",
                                   lineno, kw)
    finally:
        if owned:
            stream.close()

    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    keep_uv = bool(uvs) and any_uv and all_uv
    if any_uv and not all_uv:
        logger.warning("dropping UVs: not every face carries texture indices")
    uv = np.array(uvs, dtype=np.float64).reshape(-1, 2) if keep_uv else None
    uv_faces = np.array(uv_tris, dtype=np.int64).reshape(-1, 3) if keep_uv else None
    return RawObj(vertices, faces, uv, uv_faces, ignored)


def load_obj(source) -> TriMesh:
    """Parse OBJ text (path, bytes, or stream) into a validated TriMesh."""
    raw = parse_obj(source)
    return TriMesh(raw.vertices, raw.faces, uv=raw.uv, uv_faces=raw.uv_faces)


def save_obj(mesh: TriMesh) -> bytes:
    """Serialize a mesh to OBJ text that loads back bit-identically.

    Coordinates are printed with 17 significant digits, enough for an
    exact float64 round trip; `vt` records and `v/vt` face syntax are
    emitted only when the mesh carries UVs.
    """
    out = io.StringIO()
    for x, y, z in mesh.vertices:
        out.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    if mesh.uv is not None:
        for u, w in mesh.uv:
            out.write(f"vt {u:.17g} {w:.17g}\n")
        for (a, b, c), (ta, tb, tc) in zip(mesh.faces, mesh.uv_faces):
            out.write(f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}\n")
    else:
        for a, b, c in mesh.faces:
            out.write(f"f {a + 1} {b + 1} {c + 1}\n")
    return out.getvalue().encode("utf-8")
