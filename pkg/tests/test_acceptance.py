"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 3-8 share the canonical bulged-channel cell and its homogenized
coefficients (session fixtures); the demo scenario writes its flux CSVs to
tests/_artifacts for the plotting component.
"""

import os
import time

import numpy as np
import pytest

from pzpump import cell_mesh as cm
from pzpump import cell_problems as cp
from pzpump import fem_forms as ff
from pzpump import homogenization as hg
from pzpump import macro as mc
from pzpump import sensitivity as sn

ART = os.path.join(os.path.dirname(__file__), "_artifacts")

DEMO_EPS0 = 0.014
DEMO_WAVELENGTH = 0.5
DEMO_L = 16.0
DEMO_NX = 1601


@pytest.fixture(scope="module", autouse=True)
def _fresh_summary():
    os.makedirs(ART, exist_ok=True)
    path = os.path.join(ART, "acceptance_summary.txt")
    if os.path.exists(path):
        os.remove(path)


def report(num, ok, text):
    line = "ACCEPTANCE %d [%s] %s" % (num, "PASS" if ok else "FAIL", text)
    print(line)
    os.makedirs(ART, exist_ok=True)
    with open(os.path.join(ART, "acceptance_summary.txt"), "a") as f:
        f.write(line + "\n")
    return ok


@pytest.fixture(scope="module")
def canonical():
    """Bulged-channel canonical cell with the demo material scaling."""
    mesh = cm.generate_canonical_cell(32, cm.CanonicalGeometry(bulge=0.4))
    mat = ff.default_materials(eps0=DEMO_EPS0)
    correctors = cp.solve_all(mesh, mat)
    coeffs = hg.compute_coefficients(mesh, mat, correctors)
    return mesh, mat, correctors, coeffs


@pytest.fixture(scope="module")
def demo_inputs(canonical):
    mesh, mat, correctors, coeffs = canonical
    grads = sn.state_gradients(mesh, mat, correctors)
    c1 = mc.Coeffs1D.from_hom(coeffs, electrode=2)
    g1 = mc.Grads1D.from_coeff_gradients(grads, electrode=2)
    return c1, g1


def demo_config(c1, g1, mode, phi0=-1e5, P2=100.0, N_x=DEMO_NX, stride=10):
    k = 2 * np.pi / DEMO_WAVELENGTH
    return mc.MacroConfig(
        L=DEMO_L, N_x=N_x, dt=0.02, N_t=50, P1=0.0, P2=P2,
        wave=mc.ControlWave("abs_sine", phi0=phi0, omega=0.8 * k, k=k),
        coeffs=c1, grads=g1 if mode == "semilinear" else mc.Grads1D(),
        mode=mode, equilibrate_initial=True, stride=stride,
    ).validate()


def test_criterion_1_homogeneous_cell_exactness():
    t0 = time.time()
    mesh = cm.structured_cell(8, lambda c: np.full(c.shape[0], cm.MATRIX_PIEZO))
    doc = ff.default_material_doc(eps0=DEMO_EPS0)
    mat = ff.MaterialSet.from_unscaled(
        {"matrix_piezo": doc["elasticity"]["matrix_piezo"]},
        doc["piezo_coupling"], doc["permittivity"], doc["viscosity"],
        doc["compressibility"], DEMO_EPS0)
    correctors = cp.solve_all(mesh, mat)
    coeffs = hg.compute_coefficients(mesh, mat, correctors)
    D = mat.elasticity[cm.MATRIX_PIEZO]
    rel = np.abs(coeffs.A - D).max() / np.abs(D).max()
    elapsed = time.time() - t0
    ok = (rel < 1e-10 and np.abs(coeffs.B).max() < 1e-12
          and abs(coeffs.M) < 1e-12 and np.abs(coeffs.K).max() == 0.0
          and elapsed < 5.0)
    report(1, ok, "homogeneous cell: |A-D|/|D|=%.2e, B=%.1e, M=%.1e, K=%.1e, %.1fs"
           % (rel, np.abs(coeffs.B).max(), abs(coeffs.M),
              np.abs(coeffs.K).max(), elapsed))
    assert rel < 1e-10
    assert np.abs(coeffs.B).max() < 1e-12
    assert abs(coeffs.M) < 1e-12
    assert np.abs(coeffs.K).max() == 0.0
    assert elapsed < 5.0


def test_criterion_2_poiseuille_permeability():
    t0 = time.time()
    h = 0.125

    def carve(c):
        return np.where(np.abs(c[:, 1] - 0.5) < h, cm.FLUID, cm.MATRIX_PIEZO)

    mesh = cm.structured_cell(64, carve)
    mat = ff.default_materials(eps0=DEMO_EPS0)
    stokes = ff.assemble_stokes_system(mesh, mat)
    w, _ = cp.solve_permeability_correctors(stokes)
    K = np.array([[stokes.mean_velocity(w[j])[i] for j in range(2)]
                  for i in range(2)])
    exact = (2 * h) ** 3 / 12.0
    rel = abs(K[0, 0] - exact) / exact
    elapsed = time.time() - t0
    ok = (rel < 0.02 and abs(K[0, 1]) < 1e-10 and abs(K[1, 0]) < 1e-10
          and K[1, 1] < 1e-6 * K[0, 0] and elapsed < 60.0)
    report(2, ok, "Poiseuille: K11 err %.2e, K12=%.1e, K22/K11=%.1e, %.1fs"
           % (rel, abs(K[0, 1]), K[1, 1] / K[0, 0], elapsed))
    assert rel < 0.02
    assert abs(K[0, 1]) < 1e-10 and abs(K[1, 0]) < 1e-10
    assert K[1, 1] < 1e-6 * K[0, 0]
    assert elapsed < 60.0


def test_criterion_3_coefficient_symmetries(canonical):
    _, mat, _, c = canonical
    tol = 1e-9
    scaleA = np.abs(c.A).max()
    errs = []
    for i in range(2):
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    errs.append(abs(c.A[i, j, k, l] - c.A[k, l, i, j]))
                    errs.append(abs(c.A[i, j, k, l] - c.A[j, i, k, l]))
                    errs.append(abs(c.A[i, j, k, l] - c.A[i, j, l, k]))
    errA = max(errs) / scaleA
    errB = np.abs(c.B - c.B.T).max() / max(np.abs(c.B).max(), 1e-30)
    errS = np.abs(c.S - c.S.T).max() / max(np.abs(c.S).max(), 1e-30)
    errH = max(np.abs(c.H[a] - c.H[a].T).max()
               / max(np.abs(c.H[a]).max(), 1e-30) for a in c.electrodes)
    errK = np.abs(c.K - c.K.T).max() / max(np.abs(c.K).max(), 1e-30)
    m_bound = c.M >= c.phi_f * c.gamma > 0
    kmin = np.linalg.eigvalsh(0.5 * (c.K + c.K.T)).min()
    ok = (errA < tol and errB < tol and errS < tol and errH < tol
          and errK < tol and m_bound and kmin >= -1e-12)
    report(3, ok, "symmetries: A %.1e, B %.1e, S %.1e, H %.1e, K %.1e; "
           "M=%.3e >= phi_f*gamma=%.3e; min eig K = %.1e"
           % (errA, errB, errS, errH, errK, c.M, c.phi_f * c.gamma, kmin))
    assert errA < tol and errB < tol and errS < tol and errH < tol and errK < tol
    assert m_bound
    assert kmin >= -1e-12


def test_criterion_4_sensitivity_audit(canonical):
    t0 = time.time()
    mesh, mat, correctors, _ = canonical
    res = sn.sensitivity_audit(mesh, mat, correctors, n_random=5, seed=0,
                               tau=1e-5, tau_sweep=(1e-3, 1e-4, 1e-5),
                               sweep_fields=1, max_resolves=200)
    elapsed = time.time() - t0
    ok = res.max_rel_err < 1e-3 and res.min_order >= 1.9 and elapsed < 600.0
    report(4, ok, "sensitivity audit: max family rel err %.2e (tol 1e-3), "
           "min tau-sweep order %.3f (>= 1.9), %d re-solves, %.1fs"
           % (res.max_rel_err, res.min_order, res.n_resolves, elapsed))
    assert res.max_rel_err < 1e-3
    assert res.min_order >= 1.9
    assert elapsed < 600.0


def test_criterion_5_delta_K_extension_independence(canonical):
    mesh, mat, correctors, _ = canonical
    V1 = sn.random_periodic_velocity(mesh, seed=99)
    V2 = V1.copy()
    interior = np.abs(mesh.nodes[:, 1] - 0.5) < 0.0626
    V2[interior] += [0.17, -0.23]
    s1 = sn.sensitivity_of_coefficients(mesh, mat, correctors, V1)
    s2 = sn.sensitivity_of_coefficients(mesh, mat, correctors, V2)
    diff = np.abs(s1.K - s2.K).max()
    scale = max(np.abs(s1.K).max(), 1e-30)
    ok = diff < 1e-10 * scale
    report(5, ok, "delta-K extension independence: |dK1-dK2| = %.2e "
           "(scale %.2e, tol 1e-10 rel)" % (diff, scale))
    assert diff < 1e-10 * scale


def test_criterion_6_tangent_consistency(demo_inputs):
    c1, g1 = demo_inputs
    cfg = demo_config(c1, g1, "semilinear", N_x=201)
    grid = mc._Grid(cfg)
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(10):
        N = cfg.N_x
        state = mc.MacroState(1e-3 * rng.normal(size=N), 50.0 * rng.normal(size=N))
        prev = mc.MacroState(1e-3 * rng.normal(size=N), 50.0 * rng.normal(size=N))
        T = mc.assemble_tangent(state, prev, cfg, grid, t=0.3)
        du, dp = 1e-3 * rng.normal(size=N), 50.0 * rng.normal(size=N)
        s = 1e-6
        Rp = mc.assemble_residual(mc.MacroState(state.u + s * du, state.p + s * dp),
                                  prev, cfg, grid, 0.3)
        Rm = mc.assemble_residual(mc.MacroState(state.u - s * du, state.p - s * dp),
                                  prev, cfg, grid, 0.3)
        fd = (Rp - Rm)[grid.free] / (2 * s)
        Td = (T @ np.concatenate([du, dp]))[grid.free]
        worst = max(worst, np.linalg.norm(fd - Td) / np.linalg.norm(Td))
    lin = mc.run_simulation(demo_config(c1, g1, "linear", N_x=201))
    one_iter = bool(np.all(lin.iters == 1))
    ok = worst < 1e-6 and one_iter
    report(6, ok, "tangent: worst FD mismatch %.2e (tol 1e-6); linear mode "
           "iterations all 1: %s" % (worst, one_iter))
    assert worst < 1e-6
    assert one_iter


def test_criterion_7_pumping_dichotomy(demo_inputs):
    t0 = time.time()
    c1, g1 = demo_inputs
    results = {}
    for mode in ("linear", "semilinear"):
        cfg = demo_config(c1, g1, mode)
        series = mc.run_simulation(cfg)
        out = os.path.join(ART, "demo", mode)
        os.makedirs(out, exist_ok=True)
        mc.write_fluxes_csv(series, os.path.join(out, "fluxes.csv"))
        for k in sorted(series.snapshots):
            if k:
                mc.write_fields_csv(series, k, os.path.join(out, "fields_%d.csv" % k))
        Qp, slope_p = mc.cumulative_flux(series, "plus")
        Qm, _ = mc.cumulative_flux(series, "minus")
        q = len(series.times) * 3 // 4
        bal = np.abs(Qp[q:] - Qm[q:]).max() / max(np.abs(Qp).max(), 1e-12)
        results[mode] = (slope_p, bal)
        # recorded behavior of the reference scenario
        assert series.iters.max() <= 6
    elapsed = time.time() - t0
    slope_semi, bal_semi = results["semilinear"]
    slope_lin, _ = results["linear"]
    clause_a = slope_semi > 0
    clause_b = abs(slope_lin) < 0.1 * abs(slope_semi)
    clause_c = bal_semi < 0.05
    ok = clause_a and clause_b and clause_c and elapsed < 60.0
    report(7, ok, "pumping dichotomy: semi slope %+0.3e (>0: %s); "
           "|lin|/semi = %.3f (<0.1: %s); |Q+-Q-| balance %.3f (<0.05: %s); %.1fs"
           % (slope_semi, clause_a, abs(slope_lin) / abs(slope_semi), clause_b,
              bal_semi, clause_c, elapsed))
    if not clause_c:
        print("  note: the balance defect is the O(dt) rectification of the "
              "semilinear coefficient products by the backward-Euler update "
              "at the pinned 50-step cadence; at identical physics it "
              "converges at first order in dt (0.789 -> 0.290 -> 0.096 -> "
              "0.039 for dt = 1/50..1/3200 s) and passes below dt ~ 1/3200 s "
              "(see the decisions ledger).")
    assert clause_a, "semilinear pumping slope must be positive"
    assert clause_b, "linear slope must be < 10% of semilinear"
    assert elapsed < 60.0
    assert clause_c, ("flux balance %.3f exceeds 5%%: backward-Euler "
                      "rectification at the pinned cadence" % bal_semi)


def test_criterion_8_reverse_pumping_threshold(demo_inputs):
    c1, g1 = demo_inputs
    slopes = []
    for amp in (0.0, 0.33e5, 0.66e5, 1.0e5):
        cfg = demo_config(c1, g1, "semilinear", phi0=-amp, stride=0)
        series = mc.run_simulation(cfg)
        _, slope_m = mc.cumulative_flux(series, "mid")
        slopes.append(slope_m)
    monotone = all(slopes[i + 1] >= slopes[i] - 1e-12 for i in range(3))
    sign_change = slopes[0] < 0.0 < slopes[-1]
    ok = monotone and sign_change
    report(8, ok, "reverse-pumping threshold: Q_M slopes %s; monotone: %s; "
           "sign change: %s" % (["%+.3e" % s for s in slopes], monotone,
                                sign_change))
    assert monotone
    assert sign_change
