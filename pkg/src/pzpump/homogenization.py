"""Homogenized coefficients of the effective medium and micro-field
reconstruction (downscaling).

All coefficients are assembled from the corrector set through the cell
forms; the Biot coupling B is additionally cross-checked against its
divergence expression.  The permeability is reported in cell-normalized
units: the macroscopic Darcy law applies K/mu_bar, and the physical
permeability for a cell size eps0 is eps0^2 * K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import cell_mesh as cm
from . import fem_forms as ff
from .cell_problems import CorrectorSet
from .errors import IncompleteCorrectors

_SYM = ((0, 0), (1, 1), (0, 1))


@dataclass
class HomCoeffs:
    A: np.ndarray          # (2,2,2,2) effective elasticity [Pa]
    B: np.ndarray          # (2,2) Biot coupling [-]
    M: float               # Biot modulus [1/Pa]
    H: dict                # alpha -> (2,2) stress-voltage tensor
    S: np.ndarray          # (2,2) charge-stress tensor
    R: float               # charge-pressure coefficient
    Z: dict                # alpha -> pressure-voltage coefficient
    K: np.ndarray          # (2,2) permeability, cell units
    phi_f: float
    gamma: float
    eps0: float
    mu_bar: float

    @property
    def electrodes(self):
        return sorted(self.H.keys())

    def A_voigt(self) -> np.ndarray:
        return ff.elasticity_to_voigt(self.A)


def _fill_tensor4(vals: dict) -> np.ndarray:
    A = np.zeros((2, 2, 2, 2))
    for (i, j), (k, l) in vals:
        v = vals[((i, j), (k, l))]
        for (a, b) in ((i, j), (j, i)):
            for (c, d) in ((k, l), (l, k)):
                A[a, b, c, d] = v
                A[c, d, a, b] = v
    return A


def _fill_tensor2(vals: dict) -> np.ndarray:
    B = np.zeros((2, 2))
    for (i, j), v in vals.items():
        B[i, j] = B[j, i] = v
    return B


def compute_coefficients(mesh: cm.CellMesh, mat: ff.MaterialSet,
                         correctors: CorrectorSet,
                         forms: ff.CellForms = None) -> HomCoeffs:
    """Evaluate every homogenized coefficient from the corrector set."""
    has_fluid = bool(np.any(mesh.regions == cm.FLUID))
    correctors.require_complete(need_fluid=has_fluid)
    forms = forms or ff.assemble_cell_forms(mesh, mat)
    flux = ff.interface_flux_functional(mesh)

    measures = mesh.region_measures()
    phi_f = measures.get("fluid", 0.0) / forms.geo.cell_measure

    Pi = {m: ff.strain_mode_field(mesh, *m) for m in _SYM}
    Xi = {m: Pi[m] + correctors.omega_strain[m] for m in _SYM}
    eta = correctors.eta_strain

    a_vals = {}
    for m1 in _SYM:
        for m2 in _SYM:
            a_vals[(m1, m2)] = forms.a(Xi[m1], Xi[m2]) + forms.d(eta[m2], eta[m1])
    A = _fill_tensor4(a_vals)

    omega_p, eta_p = correctors.omega_p, correctors.eta_p
    b_vals = {m: forms.a(omega_p, Pi[m]) - forms.g(Pi[m], eta_p)
              + phi_f * (m[0] == m[1]) for m in _SYM}
    B = _fill_tensor2(b_vals)
    # cross-check against the divergence expression of the Biot coupling
    b2_vals = {m: flux(correctors.omega_strain[m]) + phi_f * (m[0] == m[1])
               for m in _SYM}
    B2 = _fill_tensor2(b2_vals)
    scale = max(np.abs(B).max(), np.abs(B2).max(), 1e-15)
    if np.abs(B - B2).max() > 1e-9 * scale:
        raise IncompleteCorrectors(
            "Biot coupling cross-check failed: |B1-B2| = %g (scale %g)"
            % (np.abs(B - B2).max(), scale))

    M = forms.a(omega_p, omega_p) + forms.d(eta_p, eta_p) + phi_f * mat.gamma

    H = {}
    Z = {}
    for alpha in sorted(correctors.omega_phi):
        om, ph = correctors.omega_phi[alpha], correctors.phi_phi[alpha]
        H[alpha] = _fill_tensor2({m: forms.a(om, Pi[m]) - forms.g(Pi[m], ph)
                                  for m in _SYM})
        Z[alpha] = -flux(om)

    S = _fill_tensor2({m: forms.a(correctors.omega_rho, Pi[m])
                       - forms.g(Pi[m], correctors.eta_rho) for m in _SYM})
    R = -flux(correctors.omega_rho)

    K = np.zeros((2, 2))
    if has_fluid:
        stokes = correctors.stokes
        for j in range(2):
            K[:, j] = stokes.mean_velocity(correctors.w[j])

    return HomCoeffs(A, B, M, H, S, R, Z, K, phi_f, mat.gamma, mat.eps0, mat.mu_bar)


def reconstruct_micro_displacement(correctors: CorrectorSet, e: np.ndarray,
                                   p: float, phibar: dict = None,
                                   rho_E: float = 0.0):
    """Micro displacement u1 and total field for a macroscopic state.

    e is the symmetric macroscopic strain; phibar maps electrode index to
    voltage.  Returns (u1, total) as node arrays.
    """
    e = np.asarray(e, dtype=float)
    if not np.allclose(e, e.T, rtol=0, atol=1e-14 * max(1.0, np.abs(e).max())):
        raise ValueError("macroscopic strain must be symmetric")
    phibar = phibar or {}
    mesh = correctors.mesh
    u1 = np.zeros((mesh.n_nodes, 2))
    for (i, j) in correctors.sym_modes:
        mult = 1.0 if i == j else 2.0
        u1 += mult * e[i, j] * correctors.omega_strain[(i, j)]
    u1 -= p * correctors.omega_p
    u1 += rho_E * correctors.omega_rho
    for alpha, val in phibar.items():
        u1 += val * correctors.omega_phi[alpha]
    total = u1 + mesh.nodes @ e.T
    return u1, total


# ---------------------------------------------------------------------------
# coefficient report (exchange format for the macro solver)

SCHEMA = "pzpump.coefficients.v1"


def coefficients_to_doc(h: HomCoeffs) -> dict:
    return {
        "schema": SCHEMA,
        "A_voigt": h.A_voigt().tolist(),
        "B": h.B.tolist(),
        "M": h.M,
        "H": {str(a): h.H[a].tolist() for a in h.electrodes},
        "S": h.S.tolist(),
        "R": h.R,
        "Z": {str(a): h.Z[a] for a in h.electrodes},
        "K": h.K.tolist(),
        "phi_f": h.phi_f,
        "gamma": h.gamma,
        "eps0": h.eps0,
        "mu_bar": h.mu_bar,
    }


def coefficients_from_doc(doc: dict) -> HomCoeffs:
    H = {int(a): np.asarray(v, dtype=float) for a, v in doc["H"].items()}
    Z = {int(a): float(v) for a, v in doc["Z"].items()}
    return HomCoeffs(
        A=ff.elasticity_from_voigt(np.asarray(doc["A_voigt"], dtype=float)),
        B=np.asarray(doc["B"], dtype=float),
        M=float(doc["M"]),
        H=H,
        S=np.asarray(doc["S"], dtype=float),
        R=float(doc["R"]),
        Z=Z,
        K=np.asarray(doc["K"], dtype=float),
        phi_f=float(doc["phi_f"]),
        gamma=float(doc["gamma"]),
        eps0=float(doc["eps0"]),
        mu_bar=float(doc["mu_bar"]),
    )


def save_coefficients(h: HomCoeffs, path) -> None:
    with open(path, "w") as f:
        json.dump(coefficients_to_doc(h), f, indent=1, sort_keys=True)
        f.write("\n")


def load_coefficients(path) -> HomCoeffs:
    with open(path) as f:
        return coefficients_from_doc(json.load(f))
