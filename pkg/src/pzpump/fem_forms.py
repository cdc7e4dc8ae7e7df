"""Cell-level bilinear forms and load functionals on a CellMesh.

P1 elements carry displacement, electric potential and pressure; the fluid
velocity uses P2.  All form values are cell averages (normalized by |Y|),
while assembled matrices and load vectors are kept un-normalized: the
characteristic problems are invariant under the common 1/|Y| factor.

Fields are represented as plain node arrays: displacement-like fields as
(n_nodes, dim), scalars as (n_nodes,).  Slave nodes carry their own values,
so non-periodic fields (the strain modes y_j e_i) evaluate correctly per
element.  Fluid velocity fields live on the P2 point set of the fluid
region, see FluidVelocitySpace.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import cell_mesh as cm
from .errors import (
    DisconnectedFluidWarning,
    EmptyFluidRegion,
    MissingMaterial,
    QuadratureError,
)

# ---------------------------------------------------------------------------
# Voigt conversions (2D, engineering shear strain)

_V2 = ((0, 0), (1, 1), (0, 1))


def elasticity_from_voigt(C: np.ndarray) -> np.ndarray:
    """3x3 Voigt matrix (sigma = C eps, eps_3 = 2 e_12) -> full (2,2,2,2)."""
    C = np.asarray(C, dtype=float)
    if C.shape != (3, 3):
        raise MissingMaterial("2D elasticity block must be 3x3 Voigt, got %r" % (C.shape,))
    if not np.allclose(C, C.T, rtol=1e-10, atol=0.0):
        raise MissingMaterial("elasticity Voigt matrix must be symmetric")
    D = np.zeros((2, 2, 2, 2))
    for I, (i, j) in enumerate(_V2):
        for J, (k, l) in enumerate(_V2):
            D[i, j, k, l] = D[j, i, k, l] = D[i, j, l, k] = D[j, i, l, k] = C[I, J]
    return D


def elasticity_to_voigt(D: np.ndarray) -> np.ndarray:
    C = np.zeros((3, 3))
    for I, (i, j) in enumerate(_V2):
        for J, (k, l) in enumerate(_V2):
            C[I, J] = D[i, j, k, l]
    return C


def piezo_from_voigt(gv: np.ndarray) -> np.ndarray:
    """2x3 Voigt block (D_k = g_kI eps_I) -> full (2,2,2) with g_kij = g_kji."""
    gv = np.asarray(gv, dtype=float)
    if gv.shape != (2, 3):
        raise MissingMaterial("2D piezo block must be 2x3 Voigt, got %r" % (gv.shape,))
    g = np.zeros((2, 2, 2))
    for k in range(2):
        for I, (i, j) in enumerate(_V2):
            g[k, i, j] = g[k, j, i] = gv[k, I]
    return g


def piezo_to_voigt(g: np.ndarray) -> np.ndarray:
    gv = np.zeros((2, 3))
    for k in range(2):
        for I, (i, j) in enumerate(_V2):
            gv[k, I] = g[k, i, j]
    return gv


def tensor4_to_mandel(D: np.ndarray) -> np.ndarray:
    """Mandel 3x3 whose eigenvalues test definiteness on symmetric strains."""
    s = np.sqrt(2.0)
    w = (1.0, 1.0, s)
    M = np.zeros((3, 3))
    for I, (i, j) in enumerate(_V2):
        for J, (k, l) in enumerate(_V2):
            M[I, J] = w[I] * w[J] * D[i, j, k, l]
    return M


def isotropic_elasticity_voigt(E: float, nu: float) -> np.ndarray:
    """Plane-strain isotropic stiffness in Voigt form."""
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


# ---------------------------------------------------------------------------
# Materials

SCALING_MODES = ("eps2", "eps1")  # d_bar = d_eps/eps0^2 (default) or /eps0


@dataclass
class MaterialSet:
    """Rescaled cell materials: g_bar = g_eps/eps0, d_bar per scaling mode,
    mu_bar = mu_eps/eps0^2.  Elasticity is stored per region code as a full
    4th-order tensor."""

    elasticity: dict                  # region code -> (2,2,2,2)
    g_bar: np.ndarray                 # (2,2,2) on matrix_piezo
    d_bar: np.ndarray                 # (2,2) on matrix_piezo
    mu_bar: float
    gamma: float
    eps0: float
    scaling: str = "eps2"

    def __post_init__(self):
        if self.scaling not in SCALING_MODES:
            raise MissingMaterial("unknown scaling mode %r" % self.scaling)
        if self.eps0 <= 0:
            raise MissingMaterial("eps0 must be positive")
        if self.mu_bar <= 0:
            raise MissingMaterial("viscosity must be positive")
        if self.gamma < 0:
            raise MissingMaterial("compressibility must be nonnegative")
        for code, D in self.elasticity.items():
            M = tensor4_to_mandel(D)
            if np.linalg.eigvalsh(M).min() <= 0:
                raise MissingMaterial("elasticity for region %s is not positive definite"
                                      % cm.region_name(code))
        dsym = 0.5 * (self.d_bar + self.d_bar.T)
        if not np.allclose(self.d_bar, dsym, rtol=1e-10, atol=0.0):
            raise MissingMaterial("permittivity must be symmetric")
        if np.linalg.eigvalsh(dsym).min() <= 0:
            raise MissingMaterial("permittivity must be positive definite")

    @classmethod
    def from_unscaled(cls, elasticity_voigt: dict, g_eps, d_eps, mu_eps,
                      gamma, eps0, scaling="eps2") -> "MaterialSet":
        elasticity = {cm.region_code(name) if isinstance(name, str) else int(name):
                      elasticity_from_voigt(C) for name, C in elasticity_voigt.items()}
        g_bar = piezo_from_voigt(g_eps) / eps0
        d_fac = eps0 ** 2 if scaling == "eps2" else eps0
        d_bar = np.asarray(d_eps, dtype=float) / d_fac
        return cls(elasticity, g_bar, d_bar, mu_eps / eps0 ** 2, gamma, eps0, scaling)

    def with_elasticity_scaled(self, factor: float) -> "MaterialSet":
        return MaterialSet({c: factor * D for c, D in self.elasticity.items()},
                           self.g_bar, self.d_bar, self.mu_bar, self.gamma,
                           self.eps0, self.scaling)

    def without_piezo_coupling(self) -> "MaterialSet":
        return MaterialSet(dict(self.elasticity), np.zeros_like(self.g_bar),
                           self.d_bar, self.mu_bar, self.gamma, self.eps0, self.scaling)


def save_materials(mat_doc: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(mat_doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_materials(path) -> MaterialSet:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise MissingMaterial("cannot read material file %s: %s" % (path, exc)) from None
    for key in ("elasticity", "piezo_coupling", "permittivity", "viscosity",
                "compressibility", "eps0"):
        if key not in doc:
            raise MissingMaterial("material file misses key %r" % key)
    return MaterialSet.from_unscaled(
        doc["elasticity"], np.asarray(doc["piezo_coupling"], dtype=float),
        np.asarray(doc["permittivity"], dtype=float), float(doc["viscosity"]),
        float(doc["compressibility"]), float(doc["eps0"]),
        doc.get("scaling", "eps2"))


def default_material_doc(eps0: float = 5e-3, scaling: str = "eps2") -> dict:
    """Plane (x1, x3) reduction of the reference piezo-polymer data set:
    soft dielectric frame, stiff conductors, water-filled channel."""
    Az = 1e7 * np.array([[6.0, 3.83, 0.0],
                         [3.83, 20.3, 0.0],
                         [0.0, 0.0, 1.23]])
    g = np.array([[0.0, 0.0, 0.01],
                  [-0.09, 5.91, 0.0]])
    d = 8.854e-12 * np.array([[18.0, 0.0],
                              [0.0, 255.3]])
    return {
        "dim": 2,
        "elasticity": {
            "matrix_piezo": Az.tolist(),
            "matrix_elastic": isotropic_elasticity_voigt(0.02e9, 0.49).tolist(),
            "conductor:1": isotropic_elasticity_voigt(200e9, 0.25).tolist(),
            "conductor:2": isotropic_elasticity_voigt(200e9, 0.25).tolist(),
        },
        "piezo_coupling": g.tolist(),
        "permittivity": d.tolist(),
        "viscosity": 8.9e-4,
        "compressibility": 1.0 / 2.15e9,
        "eps0": eps0,
        "scaling": scaling,
    }


def default_materials(eps0: float = 5e-3, scaling: str = "eps2") -> MaterialSet:
    doc = default_material_doc(eps0, scaling)
    return MaterialSet.from_unscaled(
        doc["elasticity"], doc["piezo_coupling"], doc["permittivity"],
        doc["viscosity"], doc["compressibility"], doc["eps0"], doc["scaling"])


# ---------------------------------------------------------------------------
# quadrature and reference bases

# degree-2, 3 points (weights sum to 1; integral = area * sum w f)
_QP2 = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
_QW2 = np.array([1 / 3, 1 / 3, 1 / 3])

# degree-4, 6 points (Dunavant)
_a1, _w1 = 0.445948490915965, 0.223381589678011
_a2, _w2 = 0.091576213509771, 0.109951743655322
_QP4 = np.array([
    [_a1, _a1], [1 - 2 * _a1, _a1], [_a1, 1 - 2 * _a1],
    [_a2, _a2], [1 - 2 * _a2, _a2], [_a2, 1 - 2 * _a2],
])
_QW4 = np.array([_w1, _w1, _w1, _w2, _w2, _w2])

# 2-point Gauss on [0,1] segments
_QSEG = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_WSEG = np.array([0.5, 0.5])


def p2_basis(points: np.ndarray):
    """P2 shape values (nq, 6) and reference gradients (nq, 6, 2) at
    reference points; local order [v0, v1, v2, m01, m12, m20]."""
    xi, eta = points[:, 0], points[:, 1]
    l0, l1, l2 = 1.0 - xi - eta, xi, eta
    N = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                  4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=1)
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # grad of (l0,l1,l2)
    G = np.zeros((points.shape[0], 6, 2))
    for q in range(points.shape[0]):
        L = (l0[q], l1[q], l2[q])
        for i in range(3):
            G[q, i] = (4 * L[i] - 1) * dl[i]
        G[q, 3] = 4 * (L[1] * dl[0] + L[0] * dl[1])
        G[q, 4] = 4 * (L[2] * dl[1] + L[1] * dl[2])
        G[q, 5] = 4 * (L[0] * dl[2] + L[2] * dl[0])
    return N, G


def p1_basis(points: np.ndarray):
    xi, eta = points[:, 0], points[:, 1]
    N = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    G = np.tile(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (points.shape[0], 1, 1))
    return N, G


# ---------------------------------------------------------------------------
# geometry cache

class CellGeometry:
    """Per-element geometry for a CellMesh: volumes, P1 gradients, masks."""

    def __init__(self, mesh: cm.CellMesh):
        if mesh.dimension != 2:
            raise QuadratureError("only 2D triangle meshes are supported")
        if mesh.elements.shape[1] != 3:
            raise QuadratureError("elements must be triangles")
        self.mesh = mesh
        p = mesh.nodes[mesh.elements]                    # (n_el, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]  # 2 * area
        self.volumes = 0.5 * det
        # grads[e, a, :] = grad of P1 basis of local node a
        g = np.zeros((mesh.n_elements, 3, 2))
        g[:, 1, 0] = d2[:, 1] / det
        g[:, 1, 1] = -d2[:, 0] / det
        g[:, 2, 0] = -d1[:, 1] / det
        g[:, 2, 1] = d1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        self.grads = g
        self.jac = np.stack([d1, d2], axis=2)            # columns are edge vectors
        self.cell_measure = float(self.volumes.sum())
        r = mesh.regions
        self.solid_mask = cm.is_solid(r)
        self.piezo_mask = r == cm.MATRIX_PIEZO
        self.fluid_mask = r == cm.FLUID
        self.solid_els = np.nonzero(self.solid_mask)[0]
        self.piezo_els = np.nonzero(self.piezo_mask)[0]
        self.fluid_els = np.nonzero(self.fluid_mask)[0]

    def gather_vector(self, nodal: np.ndarray, els: np.ndarray) -> np.ndarray:
        return nodal[self.mesh.elements[els]]            # (ne, 3, 2)

    def gather_scalar(self, nodal: np.ndarray, els: np.ndarray) -> np.ndarray:
        return nodal[self.mesh.elements[els]]            # (ne, 3)

    def jacobian_of(self, nodal_vec: np.ndarray, els: np.ndarray) -> np.ndarray:
        """J[e, i, j] = d(field_i)/d(y_j), constant per element for P1."""
        vals = self.gather_vector(nodal_vec, els)
        return np.einsum("eai,eaj->eij", vals, self.grads[els])

    def grad_of(self, nodal_scalar: np.ndarray, els: np.ndarray) -> np.ndarray:
        vals = self.gather_scalar(nodal_scalar, els)
        return np.einsum("ea,eaj->ej", vals, self.grads[els])


def strain_mode_field(mesh: cm.CellMesh, i: int, j: int) -> np.ndarray:
    """Homogeneous displacement mode with components Pi^ij_k = y_j delta_ik."""
    out = np.zeros((mesh.n_nodes, 2))
    out[:, i] = mesh.nodes[:, j]
    return out


def sym_modes(dim: int = 2):
    return [(0, 0), (1, 1), (0, 1)] if dim == 2 else [(0, 0), (1, 1), (2, 2),
                                                      (0, 1), (0, 2), (1, 2)]


# ---------------------------------------------------------------------------
# P1 spaces with periodic identification

class P1Space:
    """Scalar P1 space on a subset of elements, periodic slaves folded onto
    their masters.  dof_of_node is -1 outside the space support."""

    def __init__(self, mesh: cm.CellMesh, els: np.ndarray):
        self.mesh = mesh
        self.els = np.asarray(els, dtype=np.int64)
        root = mesh.node_root()
        active = np.unique(root[mesh.elements[self.els].ravel()]) if self.els.size \
            else np.zeros(0, dtype=np.int64)
        self.active_roots = active
        dof_of_root = -np.ones(mesh.n_nodes, dtype=np.int64)
        dof_of_root[active] = np.arange(active.size)
        self.dof_of_node = dof_of_root[root]
        # nodes whose root is active but which never appear in the support
        # keep their dof for scatter purposes
        self.n_dofs = active.size
        self.edofs = self.dof_of_node[mesh.elements[self.els]]  # (ne, 3)

    def scatter(self, x: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.mesh.n_nodes, fill, dtype=float)
        ok = self.dof_of_node >= 0
        out[ok] = x[self.dof_of_node[ok]]
        return out

    def restrict(self, nodal: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_dofs)
        x[self.dof_of_node[self.active_roots]] = nodal[self.active_roots]
        return x


class VectorP1Space:
    """Vector-valued version of P1Space; dof = 2*scalar_dof + component."""

    def __init__(self, mesh: cm.CellMesh, els: np.ndarray):
        self.base = P1Space(mesh, els)
        self.mesh = mesh
        self.els = self.base.els
        self.n_dofs = 2 * self.base.n_dofs
        e = self.base.edofs
        self.edofs = np.stack([2 * e + c for c in range(2)], axis=2)  # (ne, 3, 2)

    def scatter(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.mesh.n_nodes, 2))
        ok = self.base.dof_of_node >= 0
        d = self.base.dof_of_node[ok]
        out[ok, 0] = x[2 * d]
        out[ok, 1] = x[2 * d + 1]
        return out

    def restrict(self, nodal: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_dofs)
        roots = self.base.active_roots
        d = self.base.dof_of_node[roots]
        x[2 * d] = nodal[roots, 0]
        x[2 * d + 1] = nodal[roots, 1]
        return x

    def mean_constraint(self, geo: CellGeometry) -> np.ndarray:
        """Rows integrating each displacement component over the support."""
        C = np.zeros((2, self.n_dofs))
        vols = geo.volumes[self.els]
        for a in range(3):
            for c in range(2):
                np.add.at(C[c], self.edofs[:, a, c], vols / 3.0)
        return C


def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=shape).tocsr()


# ---------------------------------------------------------------------------
# the solid/dielectric forms

class CellForms:
    """Elastic, piezoelectric and dielectric forms of the cell problems.

    Evaluation methods return cell averages; the matrices (A_mat, G_mat,
    D_mat) are un-normalized and live on the periodic dof spaces
    (solid_space, potential_space).
    """

    def __init__(self, mesh: cm.CellMesh, mat: MaterialSet):
        self.mesh = mesh
        self.mat = mat
        self.geo = CellGeometry(mesh)
        geo = self.geo

        codes = set(int(c) for c in np.unique(mesh.regions)) - {cm.FLUID}
        missing = [cm.region_name(c) for c in sorted(codes) if c not in mat.elasticity]
        if missing:
            raise MissingMaterial("no elasticity data for region(s): %s"
                                  % ", ".join(missing))

        # per-element elasticity tensor (n_solid, 2,2,2,2)
        self.D_el = np.zeros((geo.solid_els.size, 2, 2, 2, 2))
        for code in codes:
            sel = mesh.regions[geo.solid_els] == code
            self.D_el[sel] = mat.elasticity[code]

        self.solid_space = VectorP1Space(mesh, geo.solid_els)
        self.potential_space = P1Space(mesh, geo.piezo_els)
        self._electrode_nodes = self._collect_electrode_nodes()

        self.A_mat = self._assemble_elasticity()
        if self.potential_space.n_dofs:
            self.G_mat = self._assemble_coupling()
            self.D_mat = self._assemble_dielectric()
        else:
            self.G_mat = sp.csr_matrix((self.solid_space.n_dofs, 0))
            self.D_mat = sp.csr_matrix((0, 0))

    # -- dirichlet bookkeeping ---------------------------------------------
    def _collect_electrode_nodes(self):
        """Potential dofs pinned on each conductor interface (by electrode)."""
        mesh = self.mesh
        out = {}
        dof = self.potential_space.dof_of_node
        for k in range(mesh.facet_tags.shape[0]):
            alpha = int(mesh.facet_tags[k])
            if alpha == cm.FACET_FLUID_SOLID:
                continue
            for v in mesh.facet_verts[k]:
                d = dof[v]
                if d >= 0:
                    out.setdefault(alpha, set()).add(int(d))
        return {alpha: np.array(sorted(s), dtype=np.int64) for alpha, s in out.items()}

    @property
    def electrode_dirichlet_dofs(self) -> dict:
        return self._electrode_nodes

    # -- assembly ------------------------------------------------------------
    def _assemble_elasticity(self):
        geo, sp_u = self.geo, self.solid_space
        els = geo.solid_els
        G = geo.grads[els]
        Ke = np.einsum("ecjdl,eaj,ebl->eacbd", self.D_el, G, G) \
            * geo.volumes[els][:, None, None, None, None]
        ed = sp_u.edofs  # (ne,3,2)
        rows = np.broadcast_to(ed[:, :, :, None, None], Ke.shape)
        cols = np.broadcast_to(ed[:, None, None, :, :], Ke.shape)
        return _coo(rows, cols, Ke, (sp_u.n_dofs, sp_u.n_dofs))

    def _assemble_coupling(self):
        geo = self.geo
        els = geo.piezo_els
        G = geo.grads[els]
        # g(u, psi) = int g_kij e_ij(u) d_k psi ; rows u-dofs, cols psi-dofs
        Ke = np.einsum("kcj,eaj,ebk->eacb", self.mat.g_bar, G, G) \
            * geo.volumes[els][:, None, None, None]
        ed_u = self.solid_space.edofs[np.searchsorted(geo.solid_els, els)]
        ed_p = self.potential_space.edofs[np.searchsorted(
            self.potential_space.els, els)]
        rows = np.broadcast_to(ed_u[:, :, :, None], Ke.shape)
        cols = np.broadcast_to(ed_p[:, None, None, :], Ke.shape)
        return _coo(rows, cols, Ke, (self.solid_space.n_dofs,
                                     self.potential_space.n_dofs))

    def _assemble_dielectric(self):
        geo, sp_p = self.geo, self.potential_space
        els = sp_p.els
        G = geo.grads[els]
        Ke = np.einsum("kl,eal,ebk->eba", self.mat.d_bar, G, G) \
            * geo.volumes[els][:, None, None]
        # d(phi, psi): rows psi (test), cols phi (trial); d is symmetric
        ed = sp_p.edofs
        rows = np.broadcast_to(ed[:, :, None], Ke.shape)
        cols = np.broadcast_to(ed[:, None, :], Ke.shape)
        return _coo(rows, cols, Ke, (sp_p.n_dofs, sp_p.n_dofs))

    # -- evaluation on node arrays -------------------------------------------
    def a(self, u: np.ndarray, v: np.ndarray) -> float:
        geo = self.geo
        els = geo.solid_els
        Ju = geo.jacobian_of(u, els)
        Jv = geo.jacobian_of(v, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        ev = 0.5 * (Jv + np.transpose(Jv, (0, 2, 1)))
        dens = np.einsum("eijkl,eij,ekl->e", self.D_el, ev, eu)
        return float((dens * geo.volumes[els]).sum() / geo.cell_measure)

    def g(self, u: np.ndarray, psi: np.ndarray) -> float:
        geo = self.geo
        els = geo.piezo_els
        if els.size == 0:
            return 0.0
        Ju = geo.jacobian_of(u, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        gp = geo.grad_of(psi, els)
        dens = np.einsum("kij,eij,ek->e", self.mat.g_bar, eu, gp)
        return float((dens * geo.volumes[els]).sum() / geo.cell_measure)

    def d(self, phi: np.ndarray, psi: np.ndarray) -> float:
        geo = self.geo
        els = geo.piezo_els
        if els.size == 0:
            return 0.0
        gphi = geo.grad_of(phi, els)
        gpsi = geo.grad_of(psi, els)
        dens = np.einsum("kl,el,ek->e", self.mat.d_bar, gphi, gpsi)
        return float((dens * geo.volumes[els]).sum() / geo.cell_measure)

    # -- load vectors ----------------------------------------------------------
    def rhs_a(self, u0: np.ndarray) -> np.ndarray:
        """f[dof(v)] = int_(Y_ms) D e(v):e(u0), un-normalized."""
        geo = self.geo
        els = geo.solid_els
        Ju = geo.jacobian_of(u0, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        G = geo.grads[els]
        fe = np.einsum("ecjkl,eaj,ekl->eac", self.D_el, G, eu) \
            * geo.volumes[els][:, None, None]
        f = np.zeros(self.solid_space.n_dofs)
        np.add.at(f, self.solid_space.edofs, fe)
        return f

    def rhs_g_by_psi(self, u0: np.ndarray) -> np.ndarray:
        """f[dof(psi)] = int_(Y_m) g_kij e_ij(u0) d_k psi, un-normalized."""
        geo = self.geo
        els = geo.piezo_els
        f = np.zeros(self.potential_space.n_dofs)
        if els.size == 0:
            return f
        Ju = geo.jacobian_of(u0, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        G = geo.grads[els]
        fe = np.einsum("kij,eij,eak->ea", self.mat.g_bar, eu, G) \
            * geo.volumes[els][:, None]
        np.add.at(f, self.potential_space.edofs, fe)
        return f

    def rhs_divergence(self) -> np.ndarray:
        """f[dof(v)] = int_(Y_ms) div v, un-normalized."""
        geo = self.geo
        els = geo.solid_els
        fe = geo.grads[els] * geo.volumes[els][:, None, None]  # (ne,3,2)
        f = np.zeros(self.solid_space.n_dofs)
        np.add.at(f, self.solid_space.edofs, fe)
        return f

    def rhs_facet_psi(self) -> np.ndarray:
        """f[dof(psi)] = int_(Gamma_mc) psi over fluid-solid facets whose
        solid side is matrix_piezo, un-normalized."""
        mesh = self.mesh
        f = np.zeros(self.potential_space.n_dofs)
        dof = self.potential_space.dof_of_node
        for k in range(mesh.facet_tags.shape[0]):
            if mesh.facet_tags[k] != cm.FACET_FLUID_SOLID:
                continue
            if mesh.regions[mesh.facet_elems[k, 1]] != cm.MATRIX_PIEZO:
                continue
            a, b = mesh.facet_verts[k]
            L = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
            for v in (a, b):
                d = dof[v]
                if d >= 0:
                    f[d] += 0.5 * L
        return f

    def gamma_mc_measure(self) -> float:
        mesh = self.mesh
        total = 0.0
        for k in range(mesh.facet_tags.shape[0]):
            if mesh.facet_tags[k] != cm.FACET_FLUID_SOLID:
                continue
            if mesh.regions[mesh.facet_elems[k, 1]] != cm.MATRIX_PIEZO:
                continue
            a, b = mesh.facet_verts[k]
            total += float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
        return total


def assemble_cell_forms(mesh: cm.CellMesh, mat: MaterialSet) -> CellForms:
    return CellForms(mesh, mat)


# ---------------------------------------------------------------------------
# interface flux functional

class LoadFunctional:
    """v -> fint_(Gamma_c) v . n^[c], evaluated through the volume identity
    -fint_(Y_ms) div v; a direct facet quadrature is kept for verification."""

    def __init__(self, mesh: cm.CellMesh, sign: float = 1.0):
        self.mesh = mesh
        self.geo = CellGeometry(mesh)
        self.sign = sign

    def __call__(self, v: np.ndarray) -> float:
        geo = self.geo
        els = geo.solid_els
        J = geo.jacobian_of(v, els)
        div = J[:, 0, 0] + J[:, 1, 1]
        return -self.sign * float((div * geo.volumes[els]).sum() / geo.cell_measure)

    def via_facets(self, v: np.ndarray) -> float:
        """Direct quadrature of fint_(Gamma_c) v . n^[c] (fluid-into-solid
        normal); valid for Y-periodic v."""
        mesh = self.mesh
        total = 0.0
        for k in range(mesh.facet_tags.shape[0]):
            if mesh.facet_tags[k] != cm.FACET_FLUID_SOLID:
                continue
            a, b = mesh.facet_verts[k]
            pa, pb = mesh.nodes[a], mesh.nodes[b]
            t = pb - pa
            n = np.array([t[1], -t[0]])
            # orient from the fluid element into the solid one
            c_fl = mesh.nodes[mesh.elements[mesh.facet_elems[k, 0]]].mean(axis=0)
            mid = 0.5 * (pa + pb)
            if np.dot(n, mid - c_fl) < 0:
                n = -n
            total += 0.5 * float(np.dot(v[a] + v[b], n))  # |n| carries ds
        return self.sign * total / self.geo.cell_measure

    def dof_vector(self, forms: CellForms) -> np.ndarray:
        """Un-normalized load over solid dofs: F[dof(v)] = -int div v."""
        return -self.sign * forms.rhs_divergence()


def interface_flux_functional(mesh: cm.CellMesh, sign: float = 1.0) -> LoadFunctional:
    return LoadFunctional(mesh, sign)


# ---------------------------------------------------------------------------
# Stokes system (P2/P1 on the fluid region)

class FluidVelocitySpace:
    """Vector P2 space on the fluid region: zero trace on Gamma_fs,
    Y-periodic across the cell boundary."""

    def __init__(self, mesh: cm.CellMesh):
        geo_els = np.nonzero(mesh.regions == cm.FLUID)[0]
        if geo_els.size == 0:
            raise EmptyFluidRegion("mesh has no fluid elements")
        self.mesh = mesh
        self.els = geo_els
        root = mesh.node_root()

        verts = np.unique(mesh.elements[geo_els].ravel())
        self.vert_ids = verts
        vert_local = {int(v): i for i, v in enumerate(verts)}

        edge_set = {}
        conn = np.zeros((geo_els.size, 6), dtype=np.int64)
        for ie, e in enumerate(geo_els):
            tri = mesh.elements[e]
            for a in range(3):
                conn[ie, a] = vert_local[int(tri[a])]
            for a, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
                key = (int(min(tri[i], tri[j])), int(max(tri[i], tri[j])))
                if key not in edge_set:
                    edge_set[key] = len(edge_set)
                conn[ie, 3 + a] = len(verts) + edge_set[key]
        self.edges = sorted(edge_set, key=edge_set.get)
        self.conn = conn
        self.n_points = len(verts) + len(self.edges)

        coords = np.zeros((self.n_points, 2))
        coords[:len(verts)] = mesh.nodes[verts]
        for k, (a, b) in enumerate(self.edges):
            coords[len(verts) + k] = 0.5 * (mesh.nodes[a] + mesh.nodes[b])
        self.point_coords = coords

        # periodic grouping of points by root keys
        keys = {}
        group_of = np.zeros(self.n_points, dtype=np.int64)
        for i, v in enumerate(verts):
            key = ("v", int(root[v]))
            group_of[i] = keys.setdefault(key, len(keys))
        for k, (a, b) in enumerate(self.edges):
            ra, rb = int(root[a]), int(root[b])
            key = ("e", min(ra, rb), max(ra, rb))
            group_of[len(verts) + k] = keys.setdefault(key, len(keys))
        self.group_of = group_of
        n_groups = len(keys)

        # constrained groups: points on fluid-solid facets
        constrained = np.zeros(n_groups, dtype=bool)
        fs = mesh.facet_tags == cm.FACET_FLUID_SOLID
        for k in np.nonzero(fs)[0]:
            a, b = int(mesh.facet_verts[k, 0]), int(mesh.facet_verts[k, 1])
            for v in (a, b):
                if v in vert_local:
                    constrained[group_of[vert_local[v]]] = True
            ekey = (min(a, b), max(a, b))
            if ekey in edge_set:
                constrained[group_of[len(verts) + edge_set[ekey]]] = True

        sdof_of_group = -np.ones(n_groups, dtype=np.int64)
        free = np.nonzero(~constrained)[0]
        sdof_of_group[free] = np.arange(free.size)
        self.sdof_of_point = sdof_of_group[group_of]
        self.n_sdofs = free.size
        self.n_dofs = 2 * self.n_sdofs
        ed = self.sdof_of_point[conn]
        self.edofs = np.where(ed[:, :, None] >= 0,
                              2 * ed[:, :, None] + np.arange(2)[None, None, :], -1)

    def scatter(self, x: np.ndarray) -> np.ndarray:
        """Dof vector -> (n_points, 2) values, zeros on Gamma_fs."""
        out = np.zeros((self.n_points, 2))
        ok = self.sdof_of_point >= 0
        d = self.sdof_of_point[ok]
        out[ok, 0] = x[2 * d]
        out[ok, 1] = x[2 * d + 1]
        return out


class FluidPressureSpace:
    """Periodic P1 space on fluid vertices with zero mean per connected
    fluid component."""

    def __init__(self, mesh: cm.CellMesh, geo: CellGeometry):
        self.base = P1Space(mesh, geo.fluid_els)
        self.n_dofs = self.base.n_dofs
        # connected components over root vertices of fluid elements
        parent = {int(r): int(r) for r in self.base.active_roots}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        root = mesh.node_root()
        for e in geo.fluid_els:
            tri = root[mesh.elements[e]]
            r0 = find(int(tri[0]))
            for v in tri[1:]:
                rv = find(int(v))
                if rv != r0:
                    parent[rv] = r0
        comp_of_root = {}
        for r in self.base.active_roots:
            comp_of_root.setdefault(find(int(r)), len(comp_of_root))
        self.n_components = len(comp_of_root)
        self.component_of_dof = np.zeros(self.n_dofs, dtype=np.int64)
        for r in self.base.active_roots:
            self.component_of_dof[self.base.dof_of_node[r]] = comp_of_root[find(int(r))]


class StokesSystem:
    """Viscous form (full-gradient, unit viscosity), divergence coupling,
    unit-force loads and the constrained solve spaces for the permeability
    cell problems."""

    def __init__(self, mesh: cm.CellMesh, mat: MaterialSet):
        self.mesh = mesh
        self.mat = mat
        self.geo = CellGeometry(mesh)
        if self.geo.fluid_els.size == 0:
            raise EmptyFluidRegion("mesh has no fluid elements")
        self.velocity = FluidVelocitySpace(mesh)
        self.pressure = FluidPressureSpace(mesh, self.geo)
        if self.pressure.n_components > 1:
            warnings.warn("fluid region has %d connected components; permeability "
                          "will be rank-deficient" % self.pressure.n_components,
                          DisconnectedFluidWarning, stacklevel=3)

        els = self.geo.fluid_els
        vols = self.geo.volumes[els]
        Jinv = np.linalg.inv(self.geo.jac[els])
        N2, G2ref = p2_basis(_QP4)
        # physical P2 gradients per element and quad point: (ne, nq, 6, 2)
        # chain rule: dN/dx_k = dN/dxi_j * (J^-1)_jk
        G2 = np.einsum("qaj,ejk->eqak", G2ref, Jinv)
        N1, _ = p1_basis(_QP4)

        # viscous block (scalar laplacian, identical per component)
        Vs = np.einsum("q,eqak,eqbk->eab", _QW4, G2, G2) * vols[:, None, None]
        # divergence coupling: rows pressure, cols velocity component dofs
        Bs = np.einsum("q,qa,eqbk->eabk", _QW4, N1, G2) * vols[:, None, None, None]
        # unit-force load per component
        Fs = np.einsum("q,qb->b", _QW4, N2)[None, :] * vols[:, None]

        vel, pre = self.velocity, self.pressure
        nv, npr = vel.n_dofs, pre.n_dofs
        ed_v = vel.edofs  # (ne, 6, 2)
        ed_p = pre.base.edofs  # (ne, 3)

        rows, cols, vals = [], [], []
        for c in range(2):
            r = np.broadcast_to(ed_v[:, :, None, c], Vs.shape)
            ccol = np.broadcast_to(ed_v[:, None, :, c], Vs.shape)
            ok = (r >= 0) & (ccol >= 0)
            rows.append(r[ok])
            cols.append(ccol[ok])
            vals.append(Vs[ok])
        self.V_mat = sp.coo_matrix((np.concatenate(vals),
                                    (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(nv, nv)).tocsr()

        r = np.broadcast_to(ed_p[:, :, None, None], Bs.shape)
        ccol = np.broadcast_to(ed_v[:, None, :, :], Bs.shape)
        ok = ccol >= 0
        self.B_mat = sp.coo_matrix((Bs[ok], (r[ok], ccol[ok])),
                                   shape=(npr, nv)).tocsr()

        self.rhs = np.zeros((2, nv))
        for c in range(2):
            ok = ed_v[:, :, c] >= 0
            np.add.at(self.rhs[c], ed_v[:, :, c][ok], Fs[ok])

        # zero-mean constraint rows per fluid component
        C = np.zeros((pre.n_components, npr))
        fe = np.einsum("q,qa->a", _QW4, N1)[None, :] * vols[:, None]
        comp_el = pre.component_of_dof[ed_p[:, 0]]
        for k in range(pre.n_components):
            sel = comp_el == k
            np.add.at(C[k], ed_p[sel].ravel(), fe[sel].ravel())
        self.C_mat = C

        self._qdata = (els, vols, G2, N2, N1)

    # evaluation helpers -----------------------------------------------------
    def viscous(self, w: np.ndarray, v: np.ndarray) -> float:
        """fint_(Y_f) grad w : grad v on point-value fields (n_points, 2)."""
        els, vols, G2, _, _ = self._qdata
        Jw = np.einsum("eai,eqak->eqik", w[self.velocity.conn], G2)
        Jv = np.einsum("eai,eqak->eqik", v[self.velocity.conn], G2)
        dens = np.einsum("q,eqik,eqik->e", _QW4, Jw, Jv)
        return float((dens * vols).sum() / self.geo.cell_measure)

    def divergence(self, q: np.ndarray, w: np.ndarray) -> float:
        """fint_(Y_f) q div w; q is a nodal scalar on the mesh."""
        els, vols, G2, _, N1 = self._qdata
        Jw = np.einsum("eai,eqak->eqik", w[self.velocity.conn], G2)
        div = Jw[:, :, 0, 0] + Jw[:, :, 1, 1]
        qv = np.einsum("qa,ea->eq", N1, q[self.mesh.elements[els]])
        dens = np.einsum("q,eq,eq->e", _QW4, qv, div)
        return float((dens * vols).sum() / self.geo.cell_measure)

    def mean_velocity(self, w: np.ndarray) -> np.ndarray:
        """fint_Y w (cell average over the whole cell)."""
        els, vols, _, N2, _ = self._qdata
        wv = np.einsum("qa,eai->eqi", N2, w[self.velocity.conn])
        return np.einsum("q,eqi,e->i", _QW4, wv, vols) / self.geo.cell_measure


def assemble_stokes_system(mesh: cm.CellMesh, mat: MaterialSet) -> StokesSystem:
    return StokesSystem(mesh, mat)
