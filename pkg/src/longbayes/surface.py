"""Triangulated surface patches, linear finite elements and SPDE precisions."""

from dataclasses import dataclass, field
import hashlib

import numpy as np
import scipy.sparse as sp

from .linalg import SparseCholesky

MIN_TRIANGLE_AREA = 1e-12  # mm^2


class MeshError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def triangle_areas(vertices, triangles):
    p = vertices[triangles]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return 0.5 * np.linalg.norm(cr, axis=1)


def _check_manifold(triangles):
    e = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                                triangles[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    bad = counts > 2
    if np.any(bad):
        a, b = uniq[np.argmax(bad)]
        raise MeshError(f"non-manifold edge ({a}, {b}) shared by {counts[bad].max()} triangles")


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh in mm with an optional analysis mask.

    ``triangles`` are zero-based vertex index triples. ``mask`` marks the
    vertices kept for analysis; it defaults to all vertices.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (F, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            f = int(np.argmax((t < 0).any(1) | (t >= len(v)).any(1)))
            raise MeshError(f"triangle {f} has vertex index out of range "
                            f"{t[f].tolist()} (V={len(v)})")
        if t.size:
            areas = triangle_areas(v, t)
            if np.any(areas < MIN_TRIANGLE_AREA):
                f = int(np.argmax(areas < MIN_TRIANGLE_AREA))
                raise MeshError(f"triangle {f} {t[f].tolist()} is degenerate "
                                f"(area {areas[f]:.3g})")
            _check_manifold(t)
        m = np.ones(len(v), bool) if self.mask is None else np.asarray(self.mask, bool)
        if m.shape != (len(v),):
            raise MeshError(f"mask length {m.shape} does not match V={len(v)}")
        object.__setattr__(self, "vertices", _frozen(v, float))
        object.__setattr__(self, "triangles", _frozen(t, np.int64))
        object.__setattr__(self, "mask", _frozen(m, bool))

    @property
    def n_vertices(self):
        return len(self.vertices)

    def submesh(self):
        """Induced mesh on the masked vertices.

        Returns the submesh and the original indices of its vertices.
        """
        keep = np.flatnonzero(self.mask)
        tri = self.triangles[self.mask[self.triangles].all(axis=1)]
        remap = -np.ones(self.n_vertices, np.int64)
        remap[keep] = np.arange(len(keep))
        return SurfaceMesh(self.vertices[keep], remap[tri]), keep

    def checksum(self):
        h = hashlib.sha256()
        for a in (self.vertices, self.triangles, self.mask):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_mesh(path):
    """Read a mesh in the plain-text ``V F`` / vertices / faces format."""
    lines = _data_lines(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: empty mesh file") from None
    try:
        nv, nf = (int(x) for x in head)
    except ValueError:
        raise MeshError(f"{path}:{lineno}: expected header 'V F', got {' '.join(head)!r}") from None
    verts, mask, tris = [], [], []
    for _ in range(nv):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshError(f"{path}: expected {nv} vertices, found {len(verts)}") from None
        if len(tok) not in (3, 4):
            raise MeshError(f"{path}:{lineno}: vertex record needs 3 or 4 fields")
        try:
            verts.append([float(x) for x in tok[:3]])
            if len(tok) == 4:
                if tok[3] not in ("0", "1"):
                    raise ValueError
                mask.append(tok[3] == "1")
        except ValueError:
            raise MeshError(f"{path}:{lineno}: malformed vertex record {' '.join(tok)!r}") from None
    for _ in range(nf):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshError(f"{path}: expected {nf} triangles, found {len(tris)}") from None
        try:
            if len(tok) != 3:
                raise ValueError
            tris.append([int(x) for x in tok])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: malformed triangle record {' '.join(tok)!r}") from None
        if min(tris[-1]) < 0 or max(tris[-1]) >= nv:
            raise MeshError(f"{path}:{lineno}: triangle index out of range {tris[-1]} (V={nv})")
    extra = next(lines, None)
    if extra is not None:
        raise MeshError(f"{path}:{extra[0]}: unexpected trailing record")
    if mask and len(mask) != nv:
        raise MeshError(f"{path}: mask given for {len(mask)} of {nv} vertices")
    try:
        return SurfaceMesh(np.array(verts).reshape(-1, 3), np.array(tris).reshape(-1, 3),
                           np.array(mask) if mask else None)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def write_mesh(mesh, path):
    with_mask = not mesh.mask.all()
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {len(mesh.triangles)}\n")
        for p, m in zip(mesh.vertices.tolist(), mesh.mask.tolist()):
            row = " ".join(repr(x) for x in p)
            fh.write(f"{row} {int(m)}\n" if with_mask else row + "\n")
        for t in mesh.triangles.tolist():
            fh.write(f"{t[0]} {t[1]} {t[2]}\n")


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass ``C`` (diagonal, mm^2) and stiffness ``G`` on the masked patch."""

    C: sp.dia_matrix
    G: sp.csr_matrix
    vertex_areas: np.ndarray
    vertex_index: np.ndarray = field(default=None)

    @property
    def n(self):
        return len(self.vertex_areas)


def assemble_fem(mesh):
    """Assemble piecewise-linear FEM matrices on the masked submesh."""
    if not mesh.mask.any():
        raise MeshError("mask is empty")
    sub, keep = mesh.submesh()
    if len(sub.triangles) == 0:
        raise MeshError("masked submesh has no triangles")
    _check_manifold(sub.triangles)
    V = sub.n_vertices
    p = sub.vertices[sub.triangles]
    # edge opposite each local vertex
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = triangle_areas(sub.vertices, sub.triangles)
    Ke = np.einsum("fad,fbd->fab", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(sub.triangles, 3, axis=1).ravel()
    cols = np.tile(sub.triangles, (1, 3)).ravel()
    G = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(V, V)).tocsr()
    G = 0.5 * (G + G.T)
    va = np.bincount(sub.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=V)
    if np.any(va <= 0):
        raise MeshError(f"{int(np.sum(va <= 0))} masked vertices belong to no triangle")
    va = _frozen(va, float)
    return FemMatrices(C=sp.diags(va).todia(), G=G.tocsr(), vertex_areas=va,
                       vertex_index=_frozen(keep, np.int64))


@dataclass(frozen=True)
class SpdePrecision:
    Q: sp.csc_matrix
    kappa: float
    tau: float


def spde_precision(fem, kappa, tau):
    """Precision ``tau * (kappa^4 C + 2 kappa^2 G + G C^-1 G)``."""
    if not (kappa > 0 and tau > 0):
        raise ValueError(f"kappa and tau must be positive, got kappa={kappa}, tau={tau}")
    K = kappa ** 2 * fem.C + fem.G
    Q = tau * (K @ sp.diags(1.0 / fem.vertex_areas) @ K)
    return SpdePrecision(Q=sp.csc_matrix(Q), kappa=float(kappa), tau=float(tau))


def spde_logdet(fem, kappa, tau):
    """log|Q| using the factored form ``Q = tau K C^-1 K`` with ``K = kappa^2 C + G``."""
    K = kappa ** 2 * fem.C + fem.G
    ld = SparseCholesky(K, f"(kappa={kappa:.4g})").logdet()
    return fem.n * np.log(tau) + 2.0 * ld - float(np.sum(np.log(fem.vertex_areas)))


def spde_marginal_variance(kappa, tau):
    """Stationary variance of the continuous alpha=2 field in 2D."""
    return 1.0 / (4.0 * np.pi * kappa ** 2 * tau)
