"""Design-velocity shape sensitivities of the homogenized coefficients.

The perturbed-form evaluators implement the exact material derivative of
each cell form under the node flow y -> y + tau*V with frozen nodal fields:
for a P1/P2 discretization realized by moving mesh nodes, the resulting
coefficient sensitivities are exact up to solver roundoff, which the
central-difference oracle verifies.

Velocity fields are nodal arrays; the state-gradient fields combine a
periodic corrector part with an affine part (the strain modes), which the
normalization terms of the perturbed forms account for.  Inside the fluid,
every velocity is canonicalized by a discrete harmonic extension of its
interface trace, making the permeability sensitivity independent of the
caller's interior extension by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import cell_mesh as cm
from . import fem_forms as ff
from . import homogenization as hg
from .cell_problems import CorrectorSet, solve_all
from .errors import ExtensionFailure, NonPeriodicVelocity, OracleBudgetExceeded

_SYM = ((0, 0), (1, 1), (0, 1))


def validate_periodic_velocity(mesh: cm.CellMesh, V: np.ndarray,
                               tol: float = 1e-9) -> None:
    V = np.asarray(V, dtype=float)
    if V.shape != (mesh.n_nodes, 2):
        raise NonPeriodicVelocity("velocity shape %r does not match mesh" % (V.shape,))
    scale = max(float(np.abs(V).max()), 1e-30)
    for m, s in mesh.periodic_pairs:
        if np.abs(V[s] - V[m]).max() > tol * scale:
            raise NonPeriodicVelocity("velocity differs at periodic pair (%d, %d)"
                                      % (m, s))


def delta_pi_field(V: np.ndarray, i: int, j: int) -> np.ndarray:
    """Material derivative of the strain mode Pi^ij: component k is V_j d_ik."""
    out = np.zeros_like(V)
    out[:, i] = V[:, j]
    return out


# ---------------------------------------------------------------------------
# harmonic extension of velocities into the fluid

def harmonic_extension_into_fluid(mesh: cm.CellMesh, V: np.ndarray,
                                  affine: np.ndarray = None) -> np.ndarray:
    """Replace fluid-interior vertex values of V by the discrete harmonic
    extension of its Gamma_fs trace (periodic across the cell boundary).

    The optional affine part L (V = L y + periodic) is subtracted before the
    periodic solve and restored afterwards; affine fields are harmonic, so
    the result extends the full field.
    """
    V = np.asarray(V, dtype=float).copy()
    geo = ff.CellGeometry(mesh)
    if geo.fluid_els.size == 0:
        return V
    Vp = V if affine is None else V - mesh.nodes @ np.asarray(affine, dtype=float).T

    space = ff.P1Space(mesh, geo.fluid_els)
    # Dirichlet trace on the fluid-solid interface
    dir_nodes = set()
    for k in np.nonzero(mesh.facet_tags == cm.FACET_FLUID_SOLID)[0]:
        dir_nodes.update(int(v) for v in mesh.facet_verts[k])
    dir_dofs = np.unique([space.dof_of_node[v] for v in dir_nodes
                          if space.dof_of_node[v] >= 0])
    mask = np.ones(space.n_dofs, dtype=bool)
    mask[dir_dofs] = False
    free = np.nonzero(mask)[0]
    if free.size == 0:
        return V

    els = geo.fluid_els
    G = geo.grads[els]
    Ke = np.einsum("eak,ebk->eab", G, G) * geo.volumes[els][:, None, None]
    ed = space.edofs
    rows = np.broadcast_to(ed[:, :, None], Ke.shape)
    cols = np.broadcast_to(ed[:, None, :], Ke.shape)
    L = sp.coo_matrix((Ke.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(space.n_dofs, space.n_dofs)).tocsc()
    Lff = L[free][:, free]
    Lfd = L[free][:, dir_dofs]
    try:
        lu = spla.splu(Lff)
    except RuntimeError as exc:
        raise ExtensionFailure("harmonic extension failed: %s" % exc) from None

    out = Vp.copy()
    # overwrite only the free (interior) fluid nodes with the extension
    is_free_dof = np.zeros(space.n_dofs, dtype=bool)
    is_free_dof[free] = True
    sel = (space.dof_of_node >= 0) & is_free_dof[np.minimum(space.dof_of_node, space.n_dofs - 1)]
    full = np.zeros(space.n_dofs)
    for c in range(2):
        data = np.zeros(space.n_dofs)
        data[space.dof_of_node[space.active_roots]] = Vp[space.active_roots, c]
        xd = data[dir_dofs]
        xf = lu.solve(-(Lfd @ xd))
        full[free] = xf
        full[dir_dofs] = xd
        vals = space.scatter(full)
        out[sel, c] = vals[sel]
    if affine is not None:
        out = out + mesh.nodes @ np.asarray(affine, dtype=float).T
    return out


# ---------------------------------------------------------------------------
# perturbed (shape-derivative) forms

class ShapeDerivativeForms:
    """delta-a, delta-d, delta-g, interface and measure sensitivities for a
    fixed velocity field V, including the -(form) * fint_Y div V
    normalization terms (active for non-periodic, affine-extended V)."""

    def __init__(self, forms: ff.CellForms, V: np.ndarray):
        self.forms = forms
        self.geo = geo = forms.geo
        self.V = np.asarray(V, dtype=float)
        mesh = forms.mesh
        if self.V.shape != (mesh.n_nodes, 2):
            raise NonPeriodicVelocity("velocity shape mismatch")
        all_els = np.arange(mesh.n_elements)
        self.JV_all = geo.jacobian_of(self.V, all_els)
        self.divV_all = self.JV_all[:, 0, 0] + self.JV_all[:, 1, 1]
        self.delta_Y = float((self.divV_all * geo.volumes).sum())
        self.mean_divV = self.delta_Y / geo.cell_measure
        self.delta_Yf = float((self.divV_all[geo.fluid_els]
                               * geo.volumes[geo.fluid_els]).sum())

    # -- measures -----------------------------------------------------------
    def delta_region_measure(self, region_code: int) -> float:
        sel = self.forms.mesh.regions == region_code
        return float((self.divV_all[sel] * self.geo.volumes[sel]).sum())

    def delta_phi_f(self) -> float:
        geo = self.geo
        phi = geo.volumes[geo.fluid_els].sum() / geo.cell_measure
        return (self.delta_Yf - phi * self.delta_Y) / geo.cell_measure

    # -- bilinear form derivatives -------------------------------------------
    def da(self, u: np.ndarray, v: np.ndarray) -> float:
        geo, forms = self.geo, self.forms
        els = geo.solid_els
        Ju = geo.jacobian_of(u, els)
        Jv = geo.jacobian_of(v, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        ev = 0.5 * (Jv + np.transpose(Jv, (0, 2, 1)))
        JV = self.JV_all[els]
        divV = self.divV_all[els]
        cu = np.einsum("eij,ejk->eik", Ju, JV)   # d(grad u) = -grad u grad V
        cv = np.einsum("eij,ejk->eik", Jv, JV)
        ecu = 0.5 * (cu + np.transpose(cu, (0, 2, 1)))
        ecv = 0.5 * (cv + np.transpose(cv, (0, 2, 1)))
        D = forms.D_el
        dens = (np.einsum("eijkl,eij,ekl->e", D, ev, eu) * divV
                - np.einsum("eijkl,eij,ekl->e", D, ev, ecu)
                - np.einsum("eijkl,eij,ekl->e", D, ecv, eu))
        val = float((dens * geo.volumes[els]).sum() / geo.cell_measure)
        return val - forms.a(u, v) * self.mean_divV

    def dd(self, phi: np.ndarray, psi: np.ndarray) -> float:
        geo, forms = self.geo, self.forms
        els = geo.piezo_els
        if els.size == 0:
            return 0.0
        gp = geo.grad_of(phi, els)
        gq = geo.grad_of(psi, els)
        JV = self.JV_all[els]
        divV = self.divV_all[els]
        cp = np.einsum("ek,ekl->el", gp, JV)     # d(grad phi) = -(grad V)^T grad phi
        cq = np.einsum("ek,ekl->el", gq, JV)
        d = forms.mat.d_bar
        dens = (np.einsum("kl,el,ek->e", d, gp, gq) * divV
                - np.einsum("kl,el,ek->e", d, cp, gq)
                - np.einsum("kl,el,ek->e", d, gp, cq))
        val = float((dens * geo.volumes[els]).sum() / geo.cell_measure)
        return val - forms.d(phi, psi) * self.mean_divV

    def dg(self, u: np.ndarray, psi: np.ndarray) -> float:
        geo, forms = self.geo, self.forms
        els = geo.piezo_els
        if els.size == 0:
            return 0.0
        Ju = geo.jacobian_of(u, els)
        eu = 0.5 * (Ju + np.transpose(Ju, (0, 2, 1)))
        gq = geo.grad_of(psi, els)
        JV = self.JV_all[els]
        divV = self.divV_all[els]
        cu = np.einsum("eij,ejk->eik", Ju, JV)
        ecu = 0.5 * (cu + np.transpose(cu, (0, 2, 1)))
        cq = np.einsum("ek,ekl->el", gq, JV)
        g = forms.mat.g_bar
        dens = (np.einsum("kij,eij,ek->e", g, eu, gq) * divV
                - np.einsum("kij,eij,ek->e", g, ecu, gq)
                - np.einsum("kij,eij,ek->e", g, eu, cq))
        val = float((dens * geo.volumes[els]).sum() / geo.cell_measure)
        return val - forms.g(u, psi) * self.mean_divV

    def dflux(self, v: np.ndarray) -> float:
        """delta of fint_(Gamma_c) v . n^[c] for a frozen field v, through
        the volume identity over the whole solid."""
        geo = self.geo
        els = geo.solid_els
        Jv = geo.jacobian_of(v, els)
        div = Jv[:, 0, 0] + Jv[:, 1, 1]
        JV = self.JV_all[els]
        tr_JvJV = np.einsum("eik,eki->e", Jv, JV)
        vols = geo.volumes[els]
        val = float(((tr_JvJV - div * self.divV_all[els]) * vols).sum()
                    / geo.cell_measure)
        int_div = float((div * vols).sum() / geo.cell_measure)
        return val + self.mean_divV * int_div

    def delta_div_integral(self, v: np.ndarray) -> float:
        """delta of fint_(Y_ms) div v (frozen v); equals -dflux(v)."""
        return -self.dflux(v)


def shape_derivative_forms(mesh: cm.CellMesh, mat: ff.MaterialSet,
                           V: np.ndarray, affine: np.ndarray = None,
                           forms: ff.CellForms = None) -> ShapeDerivativeForms:
    """Perturbed-form evaluators for one velocity field; V must be
    Y-periodic unless an affine part is declared."""
    if affine is None:
        validate_periodic_velocity(mesh, V)
    forms = forms or ff.assemble_cell_forms(mesh, mat)
    return ShapeDerivativeForms(forms, np.asarray(V, dtype=float))


# ---------------------------------------------------------------------------
# coefficient sensitivities

@dataclass
class CoeffSensitivity:
    A: np.ndarray
    B: np.ndarray
    M: float
    H: dict
    Z: dict
    K: np.ndarray

    def families(self):
        out = {"A": self.A, "B": self.B, "M": self.M, "K": self.K}
        for alpha in sorted(self.H):
            out["H%d" % alpha] = self.H[alpha]
            out["Z%d" % alpha] = self.Z[alpha]
        return out

    def __mul__(self, c: float):
        return CoeffSensitivity(c * self.A, c * self.B, c * self.M,
                                {a: c * v for a, v in self.H.items()},
                                {a: c * v for a, v in self.Z.items()},
                                c * self.K)

    __rmul__ = __mul__

    def __add__(self, other: "CoeffSensitivity"):
        return CoeffSensitivity(self.A + other.A, self.B + other.B,
                                self.M + other.M,
                                {a: self.H[a] + other.H[a] for a in self.H},
                                {a: self.Z[a] + other.Z[a] for a in self.Z},
                                self.K + other.K)

    def __sub__(self, other: "CoeffSensitivity"):
        return self + (-1.0) * other


def _delta_K(stokes, correctors: CorrectorSet, geo: ff.CellGeometry,
             JV_all, divV_all, mean_divV) -> np.ndarray:
    els = geo.fluid_els
    vols = geo.volumes[els]
    _, _, G2, N2, N1 = stokes._qdata
    conn = stokes.velocity.conn
    mesh = correctors.mesh
    QW = ff._QW4

    wv, Jw, piv = {}, {}, {}
    for k in range(2):
        w = correctors.w[k]
        wv[k] = np.einsum("qa,eai->eqi", N2, w[conn])
        Jw[k] = np.einsum("eai,eqak->eqik", w[conn], G2)
        piv[k] = np.einsum("qa,ea->eq", N1, correctors.pi[k][mesh.elements[els]])

    JV = JV_all[els]
    divV = divV_all[els]
    K = np.zeros((2, 2))
    dK = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            div_wj = Jw[j][:, :, 0, 0] + Jw[j][:, :, 1, 1]
            div_wi = Jw[i][:, :, 0, 0] + Jw[i][:, :, 1, 1]
            gradgrad = np.einsum("eqkl,eqkl->eq", Jw[i], Jw[j])
            bulk = (wv[j][:, :, i] + wv[i][:, :, j] - gradgrad
                    + piv[i] * div_wj + piv[j] * div_wi)
            conv = (np.einsum("eqkr,erl,eqkl->eq", Jw[i], JV, Jw[j])
                    + np.einsum("eqkr,erl,eqkl->eq", Jw[j], JV, Jw[i])
                    - piv[i] * np.einsum("eqkr,erk->eq", Jw[j], JV)
                    - piv[j] * np.einsum("eqkr,erk->eq", Jw[i], JV))
            dens = np.einsum("q,eq,e->e", QW, bulk, divV) \
                + np.einsum("q,eq->e", QW, conv)
            dK[i, j] = float((dens * vols).sum() / geo.cell_measure)
            K[i, j] = float((np.einsum("q,eq->e", QW, gradgrad) * vols).sum()
                            / geo.cell_measure)
    return dK - mean_divV * K


def sensitivity_of_coefficients(mesh: cm.CellMesh, mat: ff.MaterialSet,
                                correctors: CorrectorSet, V: np.ndarray,
                                affine: np.ndarray = None,
                                forms: ff.CellForms = None) -> CoeffSensitivity:
    """All implemented coefficient sensitivities along one velocity field.

    Plain velocity fields must be Y-periodic; state-gradient fields carry
    an affine part passed explicitly.  The fluid interior of V is replaced
    by the canonical harmonic extension before the permeability term.
    """
    if affine is None:
        validate_periodic_velocity(mesh, V)
    V = harmonic_extension_into_fluid(mesh, V, affine)
    forms = forms or ff.assemble_cell_forms(mesh, mat)
    dfo = ShapeDerivativeForms(forms, V)

    Pi = {m: ff.strain_mode_field(mesh, *m) for m in _SYM}
    dPi = {m: delta_pi_field(V, *m) for m in _SYM}
    Xi = {m: Pi[m] + correctors.omega_strain[m] for m in _SYM}
    eta = correctors.eta_strain
    om_p, eta_p = correctors.omega_p, correctors.eta_p

    a, g, d = forms.a, forms.g, forms.d
    da, dg, dd = dfo.da, dfo.dg, dfo.dd

    # elasticity
    a_vals = {}
    for m1 in _SYM:          # (i, j)
        for m2 in _SYM:      # (k, l)
            a_vals[(m1, m2)] = (
                da(Xi[m1], Xi[m2]) - dd(eta[m2], eta[m1])
                + a(Xi[m1], dPi[m2]) + a(dPi[m1], Xi[m2])
                - (dg(Xi[m2], eta[m1]) + dg(Xi[m1], eta[m2])
                   + g(dPi[m2], eta[m1]) + g(dPi[m1], eta[m2]))
            )
    dA = hg._fill_tensor4(a_vals)

    dphi = dfo.delta_phi_f()

    # Biot coupling
    b_vals = {}
    for m in _SYM:
        b_vals[m] = (dphi * (m[0] == m[1])
                     - dfo.delta_div_integral(correctors.omega_strain[m])
                     + a(om_p, dPi[m]) + da(om_p, Xi[m])
                     - (dg(om_p, eta[m]) + dg(Xi[m], eta_p)
                        + g(dPi[m], eta_p) + dd(eta_p, eta[m])))
    dB = hg._fill_tensor2(b_vals)

    # Biot modulus
    dM = (mat.gamma * dphi - 2.0 * dfo.dflux(om_p)
          + dd(eta_p, eta_p) + 2.0 * dg(om_p, eta_p) - da(om_p, om_p))

    # stress-voltage and pressure-voltage couplings
    dH, dZ = {}, {}
    for alpha in sorted(correctors.omega_phi):
        om_a = correctors.omega_phi[alpha]
        ph_a = correctors.phi_phi[alpha]
        h_vals = {}
        for m in _SYM:
            h_vals[m] = (a(om_a, dPi[m]) - g(dPi[m], ph_a)
                         - dg(om_a, eta[m]) - dd(ph_a, eta[m])
                         + da(om_a, Xi[m]) - dg(Xi[m], ph_a))
        dH[alpha] = hg._fill_tensor2(h_vals)
        dZ[alpha] = (dg(om_p, ph_a) - da(om_a, om_p)
                     + dg(om_a, eta_p) + dd(ph_a, eta_p)
                     - dfo.dflux(om_a))

    # permeability
    if correctors.w:
        dK = _delta_K(correctors.stokes, correctors, forms.geo,
                      dfo.JV_all, dfo.divV_all, dfo.mean_divV)
    else:
        dK = np.zeros((2, 2))

    return CoeffSensitivity(dA, dB, dM, dH, dZ, dK)


# ---------------------------------------------------------------------------
# state gradients (first-order coefficient expansion in the macro state)

@dataclass
class CoeffGradients:
    d_e: dict      # (i, j) with i <= j -> CoeffSensitivity (pair-summed off-diagonal)
    d_p: CoeffSensitivity
    d_phi: dict    # alpha -> CoeffSensitivity

    @property
    def modes(self):
        return sorted(self.d_e.keys())

    @property
    def electrodes(self):
        return sorted(self.d_phi.keys())


def state_velocity_fields(correctors: CorrectorSet):
    """The velocity fields of the first-order coefficient expansion:
    strain modes (with their affine parts), pressure and electrode modes."""
    mesh = correctors.mesh
    fields = {}
    for (i, j) in correctors.sym_modes:
        # diagonal: Xi^ii; off-diagonal: Xi^ij + Xi^ji (pair-summed so the
        # expansion contracts once per tensor entry)
        L = np.zeros((2, 2))
        if i == j:
            L[i, i] = 1.0
            mult = 1.0
        else:
            L[i, j] = L[j, i] = 1.0
            mult = 2.0
        V = mult * correctors.omega_strain[(i, j)] + mesh.nodes @ L.T
        fields[("e", (i, j))] = (V, L)
    fields[("p", None)] = (-correctors.omega_p, None)
    for alpha in sorted(correctors.omega_phi):
        fields[("phi", alpha)] = (correctors.omega_phi[alpha].copy(), None)
    return fields


def state_gradients(mesh: cm.CellMesh, mat: ff.MaterialSet,
                    correctors: CorrectorSet,
                    forms: ff.CellForms = None) -> CoeffGradients:
    forms = forms or ff.assemble_cell_forms(mesh, mat)
    d_e, d_phi = {}, {}
    d_p = None
    for (kind, key), (V, L) in state_velocity_fields(correctors).items():
        sens = sensitivity_of_coefficients(mesh, mat, correctors, V,
                                           affine=L, forms=forms)
        if kind == "e":
            d_e[key] = sens
        elif kind == "p":
            d_p = sens
        else:
            d_phi[key] = sens
    return CoeffGradients(d_e, d_p, d_phi)


def expand_coefficients(h0: hg.HomCoeffs, grads: CoeffGradients,
                        e: np.ndarray, p: float,
                        phibar: dict = None) -> hg.HomCoeffs:
    """First-order update of every coefficient family for a macro state."""
    e = np.asarray(e, dtype=float)
    phibar = phibar or {}
    total = grads.d_p * float(p)
    for (i, j), sens in grads.d_e.items():
        total = total + sens * float(e[i, j])
    for alpha, val in phibar.items():
        total = total + grads.d_phi[alpha] * float(val)
    return hg.HomCoeffs(
        A=h0.A + total.A,
        B=h0.B + total.B,
        M=h0.M + total.M,
        H={a: h0.H[a] + total.H[a] for a in h0.H},
        S=h0.S.copy(),
        R=h0.R,
        Z={a: h0.Z[a] + total.Z[a] for a in h0.Z},
        K=h0.K + total.K,
        phi_f=h0.phi_f, gamma=h0.gamma, eps0=h0.eps0, mu_bar=h0.mu_bar,
    )


# ---------------------------------------------------------------------------
# gradient report (appended to the coefficient report)

_MODE_NAMES = {(0, 0): "e11", (1, 1): "e22", (0, 1): "e12"}
_MODE_CODES = {v: k for k, v in _MODE_NAMES.items()}


def _sens_to_doc(s: CoeffSensitivity) -> dict:
    return {
        "A_voigt": ff.elasticity_to_voigt(s.A).tolist(),
        "B": s.B.tolist(),
        "M": s.M,
        "H": {str(a): np.asarray(v).tolist() for a, v in s.H.items()},
        "Z": {str(a): float(v) for a, v in s.Z.items()},
        "K": s.K.tolist(),
    }


def _sens_from_doc(doc: dict) -> CoeffSensitivity:
    return CoeffSensitivity(
        A=ff.elasticity_from_voigt(np.asarray(doc["A_voigt"], dtype=float)),
        B=np.asarray(doc["B"], dtype=float),
        M=float(doc["M"]),
        H={int(a): np.asarray(v, dtype=float) for a, v in doc["H"].items()},
        Z={int(a): float(v) for a, v in doc["Z"].items()},
        K=np.asarray(doc["K"], dtype=float),
    )


def gradients_to_doc(grads: CoeffGradients) -> dict:
    return {
        "d_e": {_MODE_NAMES[m]: _sens_to_doc(s) for m, s in grads.d_e.items()},
        "d_p": _sens_to_doc(grads.d_p),
        "d_phi": {str(a): _sens_to_doc(s) for a, s in grads.d_phi.items()},
    }


def gradients_from_doc(doc: dict) -> CoeffGradients:
    return CoeffGradients(
        d_e={_MODE_CODES[nm]: _sens_from_doc(s) for nm, s in doc["d_e"].items()},
        d_p=_sens_from_doc(doc["d_p"]),
        d_phi={int(a): _sens_from_doc(s) for a, s in doc["d_phi"].items()},
    )


def reduce_gradient_doc(doc: dict, electrode: int = 2) -> dict:
    """Scalar (d/de11, d/dp, d/dphi) triples for the 1D macro solver."""
    grads = gradients_from_doc(doc)
    de = grads.d_e[(0, 0)]
    dp = grads.d_p
    dphi = grads.d_phi[electrode]

    def entry(s):
        return (float(s.A[0, 0, 0, 0]), float(s.B[0, 0]), float(s.M),
                float(s.H[electrode][0, 0]), float(s.Z[electrode]),
                float(s.K[0, 0]))

    e_, p_, f_ = entry(de), entry(dp), entry(dphi)
    names = ("A", "B", "M", "H", "Z", "K")
    return {nm: [e_[i], p_[i], f_[i]] for i, nm in enumerate(names)}


# ---------------------------------------------------------------------------
# finite-difference oracle

def recompute_coefficients(mesh: cm.CellMesh, mat: ff.MaterialSet) -> hg.HomCoeffs:
    correctors = solve_all(mesh, mat)
    return hg.compute_coefficients(mesh, mat, correctors)


def _coeffs_as_sensitivity(c: hg.HomCoeffs) -> CoeffSensitivity:
    return CoeffSensitivity(c.A, c.B, c.M, dict(c.H), dict(c.Z), c.K)


def fd_sensitivity(mesh: cm.CellMesh, mat: ff.MaterialSet, V: np.ndarray,
                   tau: float = 1e-5, affine: np.ndarray = None,
                   canonicalize: bool = True) -> CoeffSensitivity:
    """Central-difference coefficient sensitivity: perturb the mesh by
    +-tau V (with the same canonical fluid extension the formulas use),
    re-solve all cell problems and recompute the coefficients.

    The velocity is normalized to unit magnitude before differencing and
    the result rescaled (the sensitivity is linear in V); without this,
    state fields like -omega^P (|V| ~ 1e-8) would perturb the mesh below
    floating-point resolution.
    """
    if canonicalize:
        V = harmonic_extension_into_fluid(mesh, V, affine)
    scale = float(np.abs(V).max())
    if scale == 0.0:
        z = np.zeros((2, 2))
        c0 = recompute_coefficients(mesh, mat)
        return CoeffSensitivity(np.zeros((2, 2, 2, 2)), z.copy(), 0.0,
                                {a: z.copy() for a in c0.H},
                                {a: 0.0 for a in c0.Z}, z.copy())
    Vn = V / scale
    cpl = _coeffs_as_sensitivity(recompute_coefficients(
        cm.perturb_mesh(mesh, Vn, tau), mat))
    cmi = _coeffs_as_sensitivity(recompute_coefficients(
        cm.perturb_mesh(mesh, Vn, -tau), mat))
    return (cpl - cmi) * (0.5 * scale / tau)


def _family_floor(name: str, coeff0: CoeffSensitivity) -> float:
    """Resolution floor of the FD oracle for one coefficient family: solver
    roundoff amplified by 1/tau hides sensitivities much smaller than
    ~1e-6 of the coefficient's own magnitude."""
    x0 = np.linalg.norm(np.atleast_1d(np.asarray(
        coeff0.families()[name], dtype=float)))
    return 1e-6 * x0 + 1e-12


def family_errors(formula: CoeffSensitivity, fd: CoeffSensitivity,
                  coeff0: CoeffSensitivity):
    """Frobenius-norm relative mismatch per coefficient family."""
    rows = []
    fam_f, fam_d = formula.families(), fd.families()
    for name in fam_f:
        a = np.atleast_1d(np.asarray(fam_f[name], dtype=float))
        b = np.atleast_1d(np.asarray(fam_d[name], dtype=float))
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        denom = max(na, nb, _family_floor(name, coeff0))
        rows.append((name, na, nb, np.linalg.norm(a - b) / denom))
    return rows


def relative_errors(formula: CoeffSensitivity, fd: CoeffSensitivity,
                    coeff0: CoeffSensitivity = None):
    """Per-entry mismatch rows (informational); the denominators carry the
    family magnitude so that entries below the oracle's resolution report
    small errors instead of 0/0 noise."""
    rows = []
    fam_f = formula.families()
    fam_d = fd.families()
    for name in fam_f:
        a = np.atleast_1d(np.asarray(fam_f[name], dtype=float)).ravel()
        b = np.atleast_1d(np.asarray(fam_d[name], dtype=float)).ravel()
        fam_scale = max(np.abs(a).max(), np.abs(b).max())
        floor = _family_floor(name, coeff0) if coeff0 is not None else 1e-300
        labels = _entry_labels(name, np.asarray(fam_f[name]))
        for lab, fa, fb in zip(labels, a, b):
            denom = max(abs(fa), abs(fb), fam_scale, floor, 1e-300)
            rows.append((lab, fa, fb, abs(fa - fb) / denom))
    return rows


def _entry_labels(name, arr):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return [name]
    if arr.ndim == 2:
        return ["%s_%d%d" % (name, i + 1, j + 1)
                for i in range(arr.shape[0]) for j in range(arr.shape[1])]
    if arr.ndim == 4:
        return ["%s_%d%d%d%d" % (name, i + 1, j + 1, k + 1, l + 1)
                for i in range(2) for j in range(2) for k in range(2) for l in range(2)]
    return ["%s_%d" % (name, k) for k in range(arr.size)]


@dataclass
class AuditResult:
    rows: list            # per-entry: (velocity, entry, formula, fd, rel_err)
    family_rows: list     # gate: (velocity, family, |formula|, |fd|, rel_err)
    orders: dict          # velocity -> dict family -> fitted order
    n_resolves: int

    @property
    def max_rel_err(self) -> float:
        return max((r[4] for r in self.family_rows), default=0.0)

    @property
    def min_order(self) -> float:
        vals = [o for fams in self.orders.values() for o in fams.values()]
        return min(vals) if vals else float("inf")

    def passed(self, tol: float = 1e-3, min_order: float = 1.9) -> bool:
        return self.max_rel_err <= tol and self.min_order >= min_order


def random_periodic_velocity(mesh: cm.CellMesh, seed: int, amp: float = 0.05,
                             modes: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    y = mesh.nodes
    V = np.zeros_like(y)
    for _ in range(modes):
        k = rng.integers(1, 3, size=2)
        a = rng.normal(size=2) * amp
        b = rng.normal(size=2) * amp
        phase = 2 * np.pi * (k[0] * y[:, 0] + k[1] * y[:, 1])
        V += np.outer(np.sin(phase), a) + np.outer(np.cos(phase), b)
    return V


def sensitivity_audit(mesh: cm.CellMesh, mat: ff.MaterialSet,
                      correctors: CorrectorSet = None, n_random: int = 5,
                      seed: int = 0, tau: float = 1e-5,
                      tau_sweep=(1e-3, 1e-4, 1e-5), sweep_fields=1,
                      max_resolves: int = 200) -> AuditResult:
    """Formula-vs-FD audit over random periodic velocities and the state
    fields; also fits the one-sided truncation order over a tau sweep."""
    correctors = correctors or solve_all(mesh, mat)
    forms = ff.assemble_cell_forms(mesh, mat)
    h0 = _coeffs_as_sensitivity(hg.compute_coefficients(mesh, mat, correctors, forms))

    fields = [("rand%d" % k, random_periodic_velocity(mesh, seed + k), None)
              for k in range(n_random)]
    for (kind, key), (V, L) in state_velocity_fields(correctors).items():
        if kind == "e":
            label = "state_e%d%d" % (key[0] + 1, key[1] + 1)
        elif kind == "p":
            label = "state_p"
        else:
            label = "state_phi%d" % key
        fields.append((label, V, L))

    budget = 2 * len(fields) + 2 * len(tau_sweep) * sweep_fields
    if budget > max_resolves:
        raise OracleBudgetExceeded(
            "audit needs %d cell re-solves, budget is %d" % (budget, max_resolves))

    rows = []
    fam_rows = []
    orders = {}
    n_resolves = 0

    # zero-velocity smoke row: formulas and oracle must both return zeros
    zeroV = np.zeros((mesh.n_nodes, 2))
    zero_formula = sensitivity_of_coefficients(mesh, mat, correctors, zeroV,
                                               forms=forms)
    for lab, fa, fb, rel in relative_errors(zero_formula, zero_formula, h0):
        rows.append(("zero", lab, fa, fb, rel))
    for name, na, nb, rel in family_errors(zero_formula, zero_formula, h0):
        fam_rows.append(("zero", name, na, nb, rel))

    for label, V, L in fields:
        formula = sensitivity_of_coefficients(mesh, mat, correctors, V,
                                              affine=L, forms=forms)
        fd = fd_sensitivity(mesh, mat, V, tau=tau, affine=L)
        n_resolves += 2
        for lab, fa, fb, rel in relative_errors(formula, fd, h0):
            rows.append((label, lab, fa, fb, rel))
        for name, na, nb, rel in family_errors(formula, fd, h0):
            fam_rows.append((label, name, na, nb, rel))

    for label, V, L in fields[:sweep_fields]:
        Vc = harmonic_extension_into_fluid(mesh, V, L)
        scale = float(np.abs(Vc).max())
        Vn = Vc / scale
        formula = sensitivity_of_coefficients(mesh, mat, correctors, Vc,
                                              affine=L, forms=forms)
        fam_lin =formula.families()
        fam_0 = h0.families()
        errs = {name: [] for name in fam_lin}
        for t in tau_sweep:
            ct = _coeffs_as_sensitivity(recompute_coefficients(
                cm.perturb_mesh(mesh, Vn, t), mat))
            n_resolves += 1
            fam_t = ct.families()
            for name in errs:
                err = np.asarray(fam_t[name]) - np.asarray(fam_0[name]) \
                    - (t / scale) * np.asarray(fam_lin[name])
                errs[name].append(np.linalg.norm(np.atleast_1d(err)))
        fit = {}
        logt = np.log(np.asarray(tau_sweep))
        for name, evals in errs.items():
            evals = np.asarray(evals)
            if evals.max() < _family_floor(name, h0):
                fit[name] = 2.0  # below the oracle's resolution: converged
            else:
                fit[name] = float(np.polyfit(logt, np.log(evals + 1e-300), 1)[0])
        orders[label] = fit

    return AuditResult(rows, fam_rows, orders, n_resolves)
