import numpy as np
import pytest

from pzpump import cell_mesh as cm
from pzpump import fem_forms as ff


def make_isotropic_materials(E=1e7, nu=0.3, g_scale=0.0, eps0=1.0):
    """Single-phase materials with all regions sharing one stiffness."""
    C = ff.isotropic_elasticity_voigt(E, nu).tolist()
    g = (g_scale * np.array([[0.0, 0.0, 0.3], [-0.2, 1.0, 0.0]])).tolist()
    d = np.eye(2).tolist()
    return ff.MaterialSet.from_unscaled(
        {"matrix_piezo": C, "matrix_elastic": C, "conductor:1": C, "conductor:2": C},
        g, d, 1.0, 0.0, eps0)


def homogeneous_cell(n=8):
    return cm.structured_cell(n, lambda c: np.full(c.shape[0], cm.MATRIX_PIEZO))


def laminate_cell(n=16):
    """Two solid phases layered in y1 (piezo codes on the left half)."""
    def carve(c):
        return np.where(c[:, 0] < 0.5, cm.MATRIX_PIEZO, cm.MATRIX_ELASTIC)
    return cm.structured_cell(n, carve)


def channel_cell(n=32, halfwidth=0.125):
    """Straight fluid channel around y2 = 0.5 in a piezo-matrix frame."""
    def carve(c):
        return np.where(np.abs(c[:, 1] - 0.5) < halfwidth, cm.FLUID, cm.MATRIX_PIEZO)
    return cm.structured_cell(n, carve)


def band_cell(n=20, halfheight=0.3):
    """Piezo band of measure 2*halfheight inside an elastic frame."""
    def carve(c):
        return np.where(np.abs(c[:, 1] - 0.5) < halfheight,
                        cm.MATRIX_PIEZO, cm.MATRIX_ELASTIC)
    return cm.structured_cell(n, carve)


def random_periodic_field(mesh, seed=0, amp=0.05, modes=3):
    """Smooth Y-periodic nodal vector field from a few Fourier components."""
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


def random_periodic_scalar(mesh, seed=0, amp=1.0, modes=3):
    rng = np.random.default_rng(seed)
    y = mesh.nodes
    s = np.zeros(mesh.n_nodes)
    for _ in range(modes):
        k = rng.integers(1, 3, size=2)
        phase = 2 * np.pi * (k[0] * y[:, 0] + k[1] * y[:, 1]) + rng.uniform(0, 2 * np.pi)
        s += amp * rng.normal() * np.sin(phase)
    return s


@pytest.fixture(scope="session")
def canonical_mesh():
    return cm.generate_canonical_cell(32)


@pytest.fixture(scope="session")
def canonical_materials():
    return ff.default_materials(eps0=5e-3)
