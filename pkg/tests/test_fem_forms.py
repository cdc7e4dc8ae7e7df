import numpy as np
import pytest

from pzpump import cell_mesh as cm
from pzpump import fem_forms as ff
from pzpump.errors import EmptyFluidRegion, MissingMaterial

from conftest import (
    band_cell,
    channel_cell,
    homogeneous_cell,
    make_isotropic_materials,
    random_periodic_field,
    random_periodic_scalar,
)


def test_a_form_zero_on_translations():
    mesh = homogeneous_cell()
    forms = ff.assemble_cell_forms(mesh, make_isotropic_materials())
    u = np.tile([0.7, -0.3], (mesh.n_nodes, 1))
    assert abs(forms.a(u, u)) < 1e-15


def test_a_form_constant_strain_exact():
    # homogeneous cell, u = Pi^11: a = D_1111 * |Y_s|/|Y|
    mesh = homogeneous_cell()
    mat = make_isotropic_materials(E=3e6, nu=0.25)
    forms = ff.assemble_cell_forms(mesh, mat)
    Pi = ff.strain_mode_field(mesh, 0, 0)
    D1111 = mat.elasticity[cm.MATRIX_PIEZO][0, 0, 0, 0]
    assert abs(forms.a(Pi, Pi) - D1111) < 1e-9 * D1111

    mesh_f = channel_cell(16, halfwidth=0.25)
    forms_f = ff.assemble_cell_forms(mesh_f, mat)
    Pi_f = ff.strain_mode_field(mesh_f, 0, 0)
    frac = 1.0 - mesh_f.region_measures()["fluid"]
    assert abs(forms_f.a(Pi_f, Pi_f) - D1111 * frac) < 1e-9 * D1111


def test_d_form_constant_gradient_exact():
    # d = I, psi = y1 on a cell with |Y_m|/|Y| = 0.6
    mesh = band_cell(20, halfheight=0.3)
    assert abs(mesh.region_measures()["matrix_piezo"] - 0.6) < 1e-12
    forms = ff.assemble_cell_forms(mesh, make_isotropic_materials())
    psi = mesh.nodes[:, 0].copy()
    assert abs(forms.d(psi, psi) - 0.6) < 1e-12


def test_form_symmetry_on_random_fields(canonical_mesh, canonical_materials):
    forms = ff.assemble_cell_forms(canonical_mesh, canonical_materials)
    for seed in range(5):
        u = random_periodic_field(canonical_mesh, seed=seed)
        v = random_periodic_field(canonical_mesh, seed=seed + 100)
        phi = random_periodic_scalar(canonical_mesh, seed=seed)
        psi = random_periodic_scalar(canonical_mesh, seed=seed + 100)
        a_uv, a_vu = forms.a(u, v), forms.a(v, u)
        assert abs(a_uv - a_vu) <= 1e-13 * max(abs(a_uv), 1e-30)
        d_fp, d_pf = forms.d(phi, psi), forms.d(psi, phi)
        assert abs(d_fp - d_pf) <= 1e-13 * max(abs(d_fp), 1e-30)


def test_scaling_linearity(canonical_mesh, canonical_materials):
    forms1 = ff.assemble_cell_forms(canonical_mesh, canonical_materials)
    forms2 = ff.assemble_cell_forms(canonical_mesh,
                                    canonical_materials.with_elasticity_scaled(2.0))
    u = random_periodic_field(canonical_mesh, seed=7)
    v = random_periodic_field(canonical_mesh, seed=8)
    assert forms2.a(u, v) == pytest.approx(2.0 * forms1.a(u, v), rel=1e-14)


def test_missing_material():
    mesh = channel_cell(8)
    C = ff.isotropic_elasticity_voigt(1e7, 0.3).tolist()
    with pytest.raises(MissingMaterial):
        mat = ff.MaterialSet.from_unscaled(
            {"matrix_elastic": C}, np.zeros((2, 3)), np.eye(2), 1.0, 0.0, 1.0)
        ff.assemble_cell_forms(mesh, mat)


def test_material_invariants_enforced():
    C = ff.isotropic_elasticity_voigt(1e7, 0.3)
    bad = C.copy()
    bad[0, 1] += 1.0  # breaks symmetry
    with pytest.raises(MissingMaterial):
        ff.MaterialSet.from_unscaled({"matrix_piezo": bad.tolist()},
                                     np.zeros((2, 3)), np.eye(2), 1.0, 0.0, 1.0)
    with pytest.raises(MissingMaterial):
        ff.MaterialSet.from_unscaled({"matrix_piezo": C.tolist()},
                                     np.zeros((2, 3)), -np.eye(2), 1.0, 0.0, 1.0)
    with pytest.raises(MissingMaterial):
        ff.MaterialSet.from_unscaled({"matrix_piezo": C.tolist()},
                                     np.zeros((2, 3)), np.eye(2), -1.0, 0.0, 1.0)


def test_eps_scaling_rules():
    doc = ff.default_material_doc()
    m1 = ff.default_materials(eps0=1e-3)
    m2 = ff.default_materials(eps0=2e-3)
    assert np.allclose(m2.g_bar, 0.5 * m1.g_bar)
    assert np.allclose(m2.d_bar, 0.25 * m1.d_bar)
    assert m2.mu_bar == pytest.approx(0.25 * m1.mu_bar)
    # table-caption variant: d scales with 1/eps only
    m1c = ff.default_materials(eps0=1e-3, scaling="eps1")
    m2c = ff.default_materials(eps0=2e-3, scaling="eps1")
    assert np.allclose(m2c.d_bar, 0.5 * m1c.d_bar)
    assert np.allclose(m2c.g_bar, 0.5 * m1c.g_bar)


def test_material_file_roundtrip(tmp_path):
    doc = ff.default_material_doc(eps0=2e-3)
    path = tmp_path / "mat.json"
    ff.save_materials(doc, path)
    mat = ff.load_materials(path)
    ref = ff.default_materials(eps0=2e-3)
    assert np.allclose(mat.g_bar, ref.g_bar)
    assert np.allclose(mat.d_bar, ref.d_bar)
    assert mat.mu_bar == pytest.approx(ref.mu_bar)


def test_elasticity_nullspace_is_translations():
    mesh = homogeneous_cell(6)
    forms = ff.assemble_cell_forms(mesh, make_isotropic_materials())
    A = forms.A_mat.toarray()
    scale = np.abs(A).max()
    for c in range(2):
        t = np.zeros((mesh.n_nodes, 2))
        t[:, c] = 1.0
        x = forms.solid_space.restrict(t)
        assert np.linalg.norm(A @ x) < 1e-12 * scale * np.sqrt(A.shape[0])
    evals = np.linalg.eigvalsh(0.5 * (A + A.T))
    assert np.sum(evals < 1e-10 * evals.max()) == 2  # exactly the two translations


# ---------------------------------------------------------------------------
# interface flux functional


def test_flux_functional_constant_is_zero(canonical_mesh):
    F = ff.interface_flux_functional(canonical_mesh)
    v = np.tile([0.4, 0.2], (canonical_mesh.n_nodes, 1))
    assert abs(F(v)) < 1e-15


def test_flux_functional_identity_map(canonical_mesh):
    F = ff.interface_flux_functional(canonical_mesh)
    v = canonical_mesh.nodes.copy()
    solid = 1.0 - canonical_mesh.region_measures()["fluid"]
    assert F(v) == pytest.approx(-2.0 * solid, rel=1e-12)


def test_flux_functional_divergence_free_rotation(canonical_mesh):
    F = ff.interface_flux_functional(canonical_mesh)
    v = np.column_stack([-canonical_mesh.nodes[:, 1], canonical_mesh.nodes[:, 0]])
    assert abs(F(v)) < 1e-14
    # field supported strictly inside the fluid never touches the solid form
    w = np.zeros_like(v)
    inside = (np.abs(canonical_mesh.nodes[:, 1] - 0.5) < 0.1)
    w[inside] = [0.3, -0.1]
    assert abs(F(w)) < 1e-14


def test_flux_surface_volume_equivalence(canonical_mesh):
    F = ff.interface_flux_functional(canonical_mesh)
    for seed in range(20):
        v = random_periodic_field(canonical_mesh, seed=seed)
        assert abs(F(v) - F.via_facets(v)) < 1e-10


# ---------------------------------------------------------------------------
# Stokes system


def test_stokes_viscous_matches_symbolic_integral():
    import sympy as sy

    mesh = channel_cell(8, halfwidth=0.25)
    mat = make_isotropic_materials()
    stokes = ff.assemble_stokes_system(mesh, mat)

    y1, y2 = sy.symbols("y1 y2")
    w_expr = (y1 ** 2 + y2, y1 * y2)
    v_expr = (y2 ** 2 - y1, y1 ** 2 - y2 ** 2)
    integrand = sum(sy.diff(w_expr[i], var) * sy.diff(v_expr[i], var)
                    for i in range(2) for var in (y1, y2))
    exact = float(sy.integrate(integrand, (y1, 0, 1), (y2, sy.Rational(1, 4),
                                                       sy.Rational(3, 4))))

    pts = stokes.velocity.point_coords
    w = np.column_stack([pts[:, 0] ** 2 + pts[:, 1], pts[:, 0] * pts[:, 1]])
    v = np.column_stack([pts[:, 1] ** 2 - pts[:, 0], pts[:, 0] ** 2 - pts[:, 1] ** 2])
    got = stokes.viscous(w, v) * stokes.geo.cell_measure
    assert got == pytest.approx(exact, rel=1e-13)


def test_stokes_divergence_constant_field():
    mesh = channel_cell(16, halfwidth=0.25)
    stokes = ff.assemble_stokes_system(mesh, make_isotropic_materials())
    pts = stokes.velocity.point_coords
    w = np.column_stack([pts[:, 0], np.zeros(pts.shape[0])])  # div w = 1
    q = np.ones(mesh.n_nodes)
    frac = mesh.region_measures()["fluid"]
    assert stokes.divergence(q, w) == pytest.approx(frac, rel=1e-13)


def test_stokes_empty_fluid_raises():
    mesh = homogeneous_cell()
    with pytest.raises(EmptyFluidRegion):
        ff.assemble_stokes_system(mesh, make_isotropic_materials())


def test_stokes_rhs_realizes_mean_component():
    mesh = channel_cell(16)
    stokes = ff.assemble_stokes_system(mesh, make_isotropic_materials())
    pts = stokes.velocity.point_coords
    w = np.column_stack([np.sin(2 * np.pi * pts[:, 0]),
                         np.cos(2 * np.pi * pts[:, 0])])
    # zero the wall values so w is admissible-like; rhs_k . w = int w_k
    wall = stokes.velocity.sdof_of_point < 0
    w[wall] = 0.0
    x = np.zeros(stokes.velocity.n_dofs)
    ok = stokes.velocity.sdof_of_point >= 0
    d = stokes.velocity.sdof_of_point[ok]
    x[2 * d] = w[ok, 0]
    x[2 * d + 1] = w[ok, 1]
    got = np.array([stokes.rhs[k] @ x for k in range(2)]) / stokes.geo.cell_measure
    assert np.allclose(got, stokes.mean_velocity(w), atol=1e-14)
