"""Characteristic micro-problems on the cell and the packaged correctors.

The coupled displacement/potential problems share one sparse factorization:
they differ only in their right-hand sides (strain modes, interface flux,
surface charge, electrode voltage lifting).  Rigid translations of the
displacement and, without electrodes, the potential constant are removed by
zero-mean Lagrange constraints.  The permeability problems solve the P2/P1
Stokes saddle system with unit body forces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import cell_mesh as cm
from . import fem_forms as ff
from .errors import SingularSystem, SolverFailure

_SYM_MODES = ((0, 0), (1, 1), (0, 1))


@dataclass
class CorrectorSet:
    """All micro characteristic responses on one cell.

    Solid fields are node arrays; fluid velocities live on the P2 point set
    of the StokesSystem used to compute them (None when the cell is dry).
    """

    mesh: cm.CellMesh
    omega_strain: dict          # (i, j) -> (n_nodes, 2), i <= j
    eta_strain: dict            # (i, j) -> (n_nodes,)
    omega_p: np.ndarray
    eta_p: np.ndarray
    omega_rho: np.ndarray
    eta_rho: np.ndarray
    omega_phi: dict             # alpha -> (n_nodes, 2)
    phi_phi: dict               # alpha -> (n_nodes,), carries the Dirichlet data
    w: dict = field(default_factory=dict)    # k -> (n_points, 2)
    pi: dict = field(default_factory=dict)   # k -> (n_nodes,)
    stokes: object = None

    @property
    def n_electrodes(self) -> int:
        return len(self.omega_phi)

    @property
    def sym_modes(self):
        return sorted(self.omega_strain.keys())

    def require_complete(self, need_fluid: bool) -> None:
        from .errors import IncompleteCorrectors
        if len(self.omega_strain) != 3:
            raise IncompleteCorrectors("expected 3 strain correctors, got %d"
                                       % len(self.omega_strain))
        if need_fluid and not self.w:
            raise IncompleteCorrectors("permeability correctors missing")


class CoupledSolidSolver:
    """One factorization of the (u, eta) block system with zero-mean
    constraints and electrode Dirichlet elimination."""

    def __init__(self, forms: ff.CellForms):
        self.forms = forms
        sp_u = forms.solid_space
        sp_p = forms.potential_space
        self.n_u = sp_u.n_dofs
        self.n_p = sp_p.n_dofs

        dir_dofs = sorted(set(int(d) for dofs in forms.electrode_dirichlet_dofs.values()
                              for d in dofs))
        self.dir_dofs = np.array(dir_dofs, dtype=np.int64)
        mask = np.ones(self.n_p, dtype=bool)
        mask[self.dir_dofs] = False
        self.free_dofs = np.nonzero(mask)[0]

        A = forms.A_mat
        a_scale = float(np.abs(A.data).max()) if A.nnz else 1.0
        Cu = sp.csr_matrix(sp_u.mean_constraint(forms.geo) * a_scale)

        self.has_potential = self.n_p > 0
        self.pin_potential_mean = self.has_potential and self.dir_dofs.size == 0
        if self.has_potential:
            G = forms.G_mat.tocsc()
            D = forms.D_mat.tocsc()
            self.G_free = G[:, self.free_dofs].tocsr()
            self.G_dir = G[:, self.dir_dofs].tocsr()
            self.D_ff = D[self.free_dofs][:, self.free_dofs].tocsr()
            self.D_fd = D[self.free_dofs][:, self.dir_dofs].tocsr()

            # symmetric block scaling eta = s * eta~ balances the elastic
            # and dielectric blocks (they differ by ~15 decades in SI units)
            d_scale = float(np.abs(D.data).max()) if D.nnz else 1.0
            self.pot_scale = np.sqrt(a_scale / d_scale)
            s = self.pot_scale
            if self.pin_potential_mean:
                geo = forms.geo
                cphi = np.zeros(self.n_p)
                vols = geo.volumes[sp_p.els]
                np.add.at(cphi, sp_p.edofs.ravel(), np.repeat(vols / 3.0, 3))
                Cphi = sp.csr_matrix(cphi[self.free_dofs][None, :] * a_scale)
                rows = [
                    [A, -s * self.G_free, Cu.T, None],
                    [s * self.G_free.T, s * s * self.D_ff, None, Cphi.T],
                    [Cu, None, None, None],
                    [None, Cphi, None, None],
                ]
            else:
                rows = [
                    [A, -s * self.G_free, Cu.T],
                    [s * self.G_free.T, s * s * self.D_ff, None],
                    [Cu, None, None],
                ]
            M = sp.bmat(rows, format="csc")
        else:
            M = sp.bmat([[A, Cu.T], [Cu, None]], format="csc")

        self.matrix_shape = M.shape
        try:
            self.lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularSystem("coupled cell system is singular: %s" % exc) from None

    def solve(self, rhs_u: np.ndarray, rhs_p_free: np.ndarray = None,
              lift_dir: np.ndarray = None):
        """Return (u_nodes, eta_nodes) for loads on the two blocks; lift_dir
        holds Dirichlet potential values on the eliminated dofs."""
        n = self.matrix_shape[0]
        b = np.zeros(n)
        b[:self.n_u] = rhs_u
        nf = self.free_dofs.size
        if self.has_potential:
            s = self.pot_scale
            if rhs_p_free is not None:
                b[self.n_u:self.n_u + nf] += s * rhs_p_free
            if lift_dir is not None and self.dir_dofs.size:
                b[:self.n_u] += self.G_dir @ lift_dir
                b[self.n_u:self.n_u + nf] -= s * (self.D_fd @ lift_dir)
        x = self.lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverFailure("coupled cell solve produced non-finite values")
        u = self.forms.solid_space.scatter(x[:self.n_u])
        eta_full = np.zeros(self.n_p)
        if self.has_potential:
            eta_full[self.free_dofs] = self.pot_scale * x[self.n_u:self.n_u + nf]
            if lift_dir is not None and self.dir_dofs.size:
                eta_full[self.dir_dofs] = lift_dir
        eta = self.forms.potential_space.scatter(eta_full)
        return u, eta


def solve_strain_correctors(forms: ff.CellForms, solver: CoupledSolidSolver = None):
    """(omega^ij, eta^ij) for the symmetric strain modes, driven by the
    homogeneous displacement fields Pi^ij."""
    solver = solver or CoupledSolidSolver(forms)
    omega, eta = {}, {}
    for (i, j) in _SYM_MODES:
        Pi = ff.strain_mode_field(forms.mesh, i, j)
        rhs_u = -forms.rhs_a(Pi)
        rhs_p = -forms.rhs_g_by_psi(Pi)[solver.free_dofs] if solver.has_potential else None
        omega[(i, j)], eta[(i, j)] = solver.solve(rhs_u, rhs_p)
    return omega, eta


def solve_pressure_corrector(forms: ff.CellForms, flux: ff.LoadFunctional,
                             solver: CoupledSolidSolver = None):
    solver = solver or CoupledSolidSolver(forms)
    rhs_u = -flux.dof_vector(forms)
    return solver.solve(rhs_u)


def solve_charge_corrector(forms: ff.CellForms, solver: CoupledSolidSolver = None):
    solver = solver or CoupledSolidSolver(forms)
    rhs_p = forms.rhs_facet_psi()[solver.free_dofs] if solver.has_potential else None
    return solver.solve(np.zeros(solver.n_u), rhs_p)


def solve_electrode_correctors(forms: ff.CellForms, solver: CoupledSolidSolver = None):
    """(omega-hat^alpha, phi-hat^alpha) with phi-hat = delta_ab on each
    conductor interface."""
    solver = solver or CoupledSolidSolver(forms)
    omega, phi = {}, {}
    dir_index = {int(d): k for k, d in enumerate(solver.dir_dofs)}
    for alpha, dofs in sorted(forms.electrode_dirichlet_dofs.items()):
        lift = np.zeros(solver.dir_dofs.size)
        for d in dofs:
            lift[dir_index[int(d)]] = 1.0
        omega[alpha], phi[alpha] = solver.solve(np.zeros(solver.n_u), None, lift)
    return omega, phi


def solve_permeability_correctors(stokes: ff.StokesSystem):
    """(w^k, pi^k) of the unit-body-force Stokes problems; velocities are
    returned on the P2 point set, pressures as nodal fields."""
    vel, pre = stokes.velocity, stokes.pressure
    nv, npr, nc = vel.n_dofs, pre.n_dofs, stokes.C_mat.shape[0]
    Cs = sp.csr_matrix(stokes.C_mat)
    M = sp.bmat([
        [stokes.V_mat, -stokes.B_mat.T, None],
        [stokes.B_mat, None, Cs.T],
        [None, Cs, None],
    ], format="csc")
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        from .errors import InfSupFailure
        raise InfSupFailure("Stokes saddle factorization failed (unstable "
                            "velocity/pressure pair?): %s" % exc) from None
    w, pi = {}, {}
    for k in range(2):
        b = np.zeros(M.shape[0])
        b[:nv] = stokes.rhs[k]
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverFailure("Stokes solve produced non-finite values")
        w[k] = vel.scatter(x[:nv])
        pi[k] = pre.base.scatter(x[nv:nv + npr])
    return w, pi


def solve_all(mesh: cm.CellMesh, mat: ff.MaterialSet) -> CorrectorSet:
    """Solve every corrector family on one cell, sharing factorizations."""
    forms = ff.assemble_cell_forms(mesh, mat)
    flux = ff.interface_flux_functional(mesh)
    solver = CoupledSolidSolver(forms)

    omega_s, eta_s = solve_strain_correctors(forms, solver)
    omega_p, eta_p = solve_pressure_corrector(forms, flux, solver)
    omega_r, eta_r = solve_charge_corrector(forms, solver)
    omega_a, phi_a = solve_electrode_correctors(forms, solver)

    out = CorrectorSet(mesh, omega_s, eta_s, omega_p, eta_p, omega_r, eta_r,
                       omega_a, phi_a)
    if np.any(mesh.regions == cm.FLUID):
        stokes = ff.assemble_stokes_system(mesh, mat)
        out.w, out.pi = solve_permeability_correctors(stokes)
        out.stokes = stokes
    return out


def export_correctors_csv(correctors: CorrectorSet, path) -> None:
    """Field snapshot: node index, coordinates, solid corrector components."""
    mesh = correctors.mesh
    cols = ["node", "y1", "y2"]
    data = [np.arange(mesh.n_nodes), mesh.nodes[:, 0], mesh.nodes[:, 1]]
    for (i, j) in correctors.sym_modes:
        for c in range(2):
            cols.append("omega_e%d%d_%d" % (i + 1, j + 1, c + 1))
            data.append(correctors.omega_strain[(i, j)][:, c])
        cols.append("eta_e%d%d" % (i + 1, j + 1))
        data.append(correctors.eta_strain[(i, j)])
    for c in range(2):
        cols.append("omega_p_%d" % (c + 1))
        data.append(correctors.omega_p[:, c])
    cols.append("eta_p")
    data.append(correctors.eta_p)
    for alpha in sorted(correctors.omega_phi):
        for c in range(2):
            cols.append("omega_phi%d_%d" % (alpha, c + 1))
            data.append(correctors.omega_phi[alpha][:, c])
        cols.append("phi_hat%d" % alpha)
        data.append(correctors.phi_phi[alpha])
    arr = np.column_stack(data)
    header = "# schema: pzpump.correctors.v1\n" + ",".join(cols)
    np.savetxt(path, arr, delimiter=",", header=header, comments="")
