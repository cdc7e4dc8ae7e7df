"""Semilinear macroscopic solver on a 1D domain.

P1 Galerkin in space, backward Euler in time; the residual uses the
state-expanded coefficients X~ = X0 + dX_e e + dX_p p + dX_phi phi at every
Gauss point and the tangent assembles the corresponding incremental
coefficients, so Newton converges quadratically.  In linear mode the
expansion is frozen at X0.

Boundary conditions: u = 0 and p = P1 at the left end, p = P2 and the
traction -P2 at the right end.  Cumulative fluxes accumulate +x-directed
transport at both ends (see the decisions ledger on the sign convention).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConfigError,
    LinearSolveFailure,
    MissingPreviousState,
    NewtonDivergence,
    SingularElasticity,
)

FLUX_SCHEMA = "pzpump.fluxes.v1"
FIELDS_SCHEMA = "pzpump.fields.v1"

_GP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GW = np.array([0.5, 0.5])


# ---------------------------------------------------------------------------
# control wave

@dataclass(frozen=True)
class ControlWave:
    """Electrode-2 voltage wave: a travelling |sin| wave (abs_sine) or a
    clipped-cosine pulse train (pulse)."""

    mode: str                       # "abs_sine" | "pulse"
    phi0: float = 0.0               # abs-sine amplitude [V]
    omega: float = 0.0              # abs-sine angular frequency [rad/s]
    k: float = 0.0                  # abs-sine wave number [rad/m]
    phi_star: float = 0.0           # pulse amplitude [V]
    b1: float = 0.0
    b2: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.mode not in ("abs_sine", "pulse"):
            raise ConfigError("unknown wave mode %r" % self.mode)

    def __call__(self, x, t, x2=0.0):
        x = np.asarray(x, dtype=float)
        if self.mode == "abs_sine":
            return self.phi0 * np.abs(np.sin(self.omega * t - self.k * x))
        psi = self.b1 * x + self.b2 * x2 - self.c * t + self.d
        out = 0.5 * (1.0 + np.cos(psi + np.pi)) * self.phi_star
        return np.where(psi < 0.0, out, 0.0)

    @classmethod
    def from_doc(cls, doc: dict) -> "ControlWave":
        mode = doc.get("mode")
        if mode == "abs_sine":
            keys = ("phi0", "omega", "k")
        elif mode == "pulse":
            keys = ("phi_star", "b1", "b2", "c", "d")
        else:
            raise ConfigError("wave mode must be 'abs_sine' or 'pulse'")
        try:
            return cls(mode=mode, **{k: float(doc[k]) for k in keys})
        except KeyError as exc:
            raise ConfigError("wave config misses key %s" % exc) from None


def evaluate_control(wave: ControlWave, x, t, x2=0.0):
    return wave(x, t, x2)


def pulse_wave_x1(phi_star: float = 4e5) -> ControlWave:
    """Reference pulse-train wave travelling along x1 only."""
    return ControlWave("pulse", phi_star=phi_star,
                       b1=np.pi / 0.03, b2=0.0, c=10 * np.pi, d=0.0)


# ---------------------------------------------------------------------------
# scalar (1D) coefficient reduction

@dataclass
class Coeffs1D:
    """Scalar reduction: A = A_1111, B = B_11, K0 = K_11, H and Z from the
    driven electrode (the other electrode is grounded)."""

    A: float
    B: float
    M: float
    H: float
    Z: float
    K0: float
    mu_bar: float

    @classmethod
    def from_hom(cls, h, electrode: int = 2) -> "Coeffs1D":
        return cls(A=float(h.A[0, 0, 0, 0]), B=float(h.B[0, 0]), M=float(h.M),
                   H=float(h.H[electrode][0, 0]), Z=float(h.Z[electrode]),
                   K0=float(h.K[0, 0]), mu_bar=float(h.mu_bar))

    def to_doc(self) -> dict:
        return {"A": self.A, "B": self.B, "M": self.M, "H": self.H,
                "Z": self.Z, "K0": self.K0, "mu_bar": self.mu_bar}

    @classmethod
    def from_doc(cls, doc: dict) -> "Coeffs1D":
        try:
            return cls(**{k: float(doc[k]) for k in
                          ("A", "B", "M", "H", "Z", "K0", "mu_bar")})
        except KeyError as exc:
            raise ConfigError("coefficient doc misses key %s" % exc) from None


@dataclass
class Grads1D:
    """(d/de, d/dp, d/dphi) of each scalar coefficient; zeros in linear mode."""

    A: tuple = (0.0, 0.0, 0.0)
    B: tuple = (0.0, 0.0, 0.0)
    M: tuple = (0.0, 0.0, 0.0)
    H: tuple = (0.0, 0.0, 0.0)
    Z: tuple = (0.0, 0.0, 0.0)
    K: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_coeff_gradients(cls, grads, electrode: int = 2) -> "Grads1D":
        def reduce(sens):
            return (float(sens.A[0, 0, 0, 0]), float(sens.B[0, 0]),
                    float(sens.M), float(sens.H[electrode][0, 0]),
                    float(sens.Z[electrode]), float(sens.K[0, 0]))

        de = reduce(grads.d_e[(0, 0)])
        dp = reduce(grads.d_p)
        dphi = reduce(grads.d_phi[electrode])
        names = ("A", "B", "M", "H", "Z", "K")
        return cls(**{nm: (de[i], dp[i], dphi[i]) for i, nm in enumerate(names)})

    def to_doc(self) -> dict:
        return {nm: list(getattr(self, nm)) for nm in ("A", "B", "M", "H", "Z", "K")}

    @classmethod
    def from_doc(cls, doc: dict) -> "Grads1D":
        return cls(**{nm: tuple(float(v) for v in doc[nm])
                      for nm in ("A", "B", "M", "H", "Z", "K")})

    def is_zero(self) -> bool:
        return all(all(v == 0.0 for v in getattr(self, nm))
                   for nm in ("A", "B", "M", "H", "Z", "K"))


def reduced_1d_coefficients(A, B, M, H, Z, K0, dK):
    """Eliminated-strain coefficients of the reduced 1D flow model:
    C = M + B A^-1 B, F = Z + B A^-1 H, and the pressure/voltage
    permeability slopes from dK = (dK_e, dK_p, dK_phi)."""
    if A == 0.0:
        raise SingularElasticity("reduced model needs A > 0")
    dKe, dKp, dKphi = dK
    return {
        "C": M + B * B / A,
        "F": Z + B * H / A,
        "K_p": dKp + dKe * B / A,
        "K_phi": dKphi - dKe * H / A,
    }


# ---------------------------------------------------------------------------
# configuration

@dataclass
class MacroConfig:
    L: float = 1.0
    N_x: int = 201
    dt: float = 0.02
    N_t: int = 50
    P1: float = 0.0
    P2: float = 0.0
    wave: ControlWave = field(default_factory=lambda: ControlWave("abs_sine"))
    coeffs: Coeffs1D = None
    grads: Grads1D = field(default_factory=Grads1D)
    mode: str = "semilinear"
    newton_tol: float = 1e-8
    max_iter: int = 20
    f_s: float = 0.0                # solid volume force
    f_f: float = 0.0                # fluid volume force (Darcy drive)
    stride: int = 10                # field snapshot stride
    h_sign: float = 1.0             # sign convention of the H phi stress term
    # The displacement is quasi-static (no time derivative in the momentum
    # equation), so its consistent initial value is the equilibrium under
    # phi(x, 0) and p = 0; without it, a control wave that is nonzero at
    # t = 0 (the |sin| wave) expels a spurious one-time fluid volume.
    equilibrate_initial: bool = False

    def validate(self):
        if not (self.L > 0 and self.dt > 0 and self.N_x >= 3 and self.N_t >= 1):
            raise ConfigError("need L > 0, dt > 0, N_x >= 3, N_t >= 1")
        if self.newton_tol <= 0:
            raise ConfigError("newton_tol must be positive")
        if self.mode not in ("linear", "semilinear"):
            raise ConfigError("mode must be 'linear' or 'semilinear'")
        if self.coeffs is None:
            raise ConfigError("coefficients missing")
        if self.coeffs.A <= 0:
            raise SingularElasticity("A must be positive")
        return self


@dataclass
class MacroState:
    u: np.ndarray
    p: np.ndarray

    def copy(self):
        return MacroState(self.u.copy(), self.p.copy())


@dataclass
class TimeSeries:
    times: np.ndarray           # (N_t + 1,)
    x: np.ndarray               # (N_x,)
    w_minus: np.ndarray         # seepage at x_- per time level
    w_mid: np.ndarray
    w_plus: np.ndarray
    iters: np.ndarray           # Newton iterations per step (index 1..N_t)
    residual_histories: list    # per step: list of residual norms
    snapshots: dict             # time index -> dict(u, p, w)


# ---------------------------------------------------------------------------
# assembly

class _Grid:
    def __init__(self, cfg: MacroConfig):
        self.N = cfg.N_x
        self.x = np.linspace(0.0, cfg.L, cfg.N_x)
        self.dx = self.x[1] - self.x[0]
        self.xg = self.x[:-1, None] + self.dx * _GP[None, :]   # (ne, 2)
        # dirichlet: u at left, p at both ends
        free = np.ones(2 * self.N, dtype=bool)
        free[0] = False
        free[self.N] = False
        free[2 * self.N - 1] = False
        self.free = free


def _expanded(cfg: MacroConfig, name: str, e, p, phi):
    X0 = getattr(cfg.coeffs, name if name != "K" else "K0")
    if cfg.mode == "linear":
        return X0 * np.ones_like(e)
    de, dp, dphi = getattr(cfg.grads, name)
    return X0 + de * e + dp * p + dphi * phi


def _gauss_state(grid: _Grid, state: MacroState):
    """Element strain (constant) and pressure at the Gauss points."""
    du = np.diff(state.u) / grid.dx
    e = np.repeat(du[:, None], 2, axis=1)
    pg = state.p[:-1, None] * (1 - _GP)[None, :] + state.p[1:, None] * _GP[None, :]
    return e, pg


def _force_at(f, xg):
    """Volume forces may be constants or callables of x."""
    if callable(f):
        return np.asarray(f(xg), dtype=float)
    return np.full_like(xg, float(f))


def assemble_residual(state: MacroState, prev: MacroState, cfg: MacroConfig,
                      grid: _Grid, t: float) -> np.ndarray:
    """Galerkin residual of the time-discretized system at the iterate."""
    if prev is None:
        raise MissingPreviousState("previous time-step state required")
    N, dx = grid.N, grid.dx
    e, pg = _gauss_state(grid, state)
    e_prev, p_prev = _gauss_state(grid, prev)
    phi = cfg.wave(grid.xg, t)
    phi_prev = cfg.wave(grid.xg, t - cfg.dt)

    At = _expanded(cfg, "A", e, pg, phi)
    Bt = _expanded(cfg, "B", e, pg, phi)
    Mt = _expanded(cfg, "M", e, pg, phi)
    Ht = _expanded(cfg, "H", e, pg, phi)
    Zt = _expanded(cfg, "Z", e, pg, phi)
    Kt = _expanded(cfg, "K", e, pg, phi)

    sigma = At * e - Bt * pg + cfg.h_sign * Ht * phi      # (ne, 2)
    dpdx = np.repeat((np.diff(state.p) / dx)[:, None], 2, axis=1)
    ff_g = _force_at(cfg.f_f, grid.xg)
    fs_g = _force_at(cfg.f_s, grid.xg)
    flux = cfg.dt / cfg.coeffs.mu_bar * Kt * (dpdx - ff_g)
    mass = (Bt * (e - e_prev) + Mt * (pg - p_prev) - Zt * (phi - phi_prev))

    R = np.zeros(2 * N)
    # momentum: sum_gp w * sigma * v' ; v' = +-1/dx
    s_el = dx * (sigma @ _GW)
    np.add.at(R, np.arange(N - 1), -s_el / dx)
    np.add.at(R, np.arange(1, N), s_el / dx)
    # volume force and right-end traction -P2
    np.add.at(R, np.arange(N - 1), -dx * (fs_g @ (_GW * (1 - _GP))))
    np.add.at(R, np.arange(1, N), -dx * (fs_g @ (_GW * _GP)))
    R[N - 1] -= -cfg.P2

    m0 = dx * (mass @ (_GW * (1 - _GP)))
    m1 = dx * (mass @ (_GW * _GP))
    q_el = dx * (flux @ _GW)
    np.add.at(R, N + np.arange(N - 1), m0 - q_el / dx)
    np.add.at(R, N + np.arange(1, N), m1 + q_el / dx)
    return R


def assemble_tangent(state: MacroState, prev: MacroState, cfg: MacroConfig,
                     grid: _Grid, t: float) -> sp.csr_matrix:
    """Tangential incremental coefficients assembled into the 2x2 block
    operator (the exact Jacobian of the residual; phi is a given control)."""
    if prev is None:
        raise MissingPreviousState("previous time-step state required")
    N, dx = grid.N, grid.dx
    e, pg = _gauss_state(grid, state)
    e_prev, p_prev = _gauss_state(grid, prev)
    phi = cfg.wave(grid.xg, t)
    phi_prev = cfg.wave(grid.xg, t - cfg.dt)

    At = _expanded(cfg, "A", e, pg, phi)
    Bt = _expanded(cfg, "B", e, pg, phi)
    Mt = _expanded(cfg, "M", e, pg, phi)
    Kt = _expanded(cfg, "K", e, pg, phi)
    if cfg.mode == "linear":
        zero = np.zeros_like(e)
        dAe = dAp = dBe = dBp = dHe = dHp = zero
        dMe = dMp = dZe = dZp = dKe = dKp = zero
    else:
        dAe, dAp, _ = cfg.grads.A
        dBe, dBp, _ = cfg.grads.B
        dMe, dMp, _ = cfg.grads.M
        dHe, dHp, _ = cfg.grads.H
        dZe, dZp, _ = cfg.grads.Z
        dKe, dKp, _ = cfg.grads.K

    dpdx = np.repeat((np.diff(state.p) / dx)[:, None], 2, axis=1)
    ff_g = _force_at(cfg.f_f, grid.xg)
    # tangential incremental coefficients at the Gauss points
    A_bar = At + dAe * e - dBe * pg + cfg.h_sign * dHe * phi
    B_bar = Bt + dBp * pg - dAp * e - cfg.h_sign * dHp * phi
    D_bar = Bt + dBe * (e - e_prev) + dMe * (pg - p_prev) - dZe * (phi - phi_prev)
    M_bar = Mt + dMp * (pg - p_prev) + dBp * (e - e_prev) - dZp * (phi - phi_prev)
    K_bar = Kt
    G_bar = dKe * (dpdx - ff_g)
    Q_bar = dKp * (dpdx - ff_g)

    ne = N - 1
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    iL = np.arange(ne)
    iR = iL + 1
    gphi = np.stack([1 - _GP, _GP])          # (2 local nodes, 2 gp)

    # momentum row (test v), coupling to du and dp
    a_el = dx * (A_bar @ _GW) / dx ** 2       # integral A_bar /dx^2
    b_el = dx * (B_bar * _GW[None, :])        # per-gp weights for p coupling
    for (rv, sv) in ((iL, -1.0), (iR, 1.0)):
        add(rv, iL, sv * a_el * (-1.0))
        add(rv, iR, sv * a_el * (+1.0))
        for a, nodes in ((0, iL), (1, iR)):
            add(rv, N + nodes, -sv * (b_el @ gphi[a]) / dx)

    # mass row (test q), coupling to du and dp
    d_el = dx * (D_bar * _GW[None, :])
    m_el = dx * (M_bar * _GW[None, :])
    kp_el = cfg.dt / cfg.coeffs.mu_bar * dx * (K_bar @ _GW) / dx ** 2
    g_el = cfg.dt / cfg.coeffs.mu_bar * dx * (G_bar @ _GW) / dx
    q_el2 = cfg.dt / cfg.coeffs.mu_bar * dx * (Q_bar * _GW[None, :]) / dx
    for a, nodesq in ((0, iL), (1, iR)):
        # q * D_bar du'
        add(N + nodesq, iL, (d_el @ gphi[a]) * (-1.0 / dx))
        add(N + nodesq, iR, (d_el @ gphi[a]) * (+1.0 / dx))
        # q * M_bar dp
        for b, nodesp in ((0, iL), (1, iR)):
            add(N + nodesq, N + nodesp, m_el @ (gphi[a] * gphi[b]))
    for (rq, sq) in ((iL, -1.0), (iR, 1.0)):
        # q' K_bar dp'
        add(N + rq, N + iL, sq * kp_el * (-1.0))
        add(N + rq, N + iR, sq * kp_el * (+1.0))
        # q' G_bar du'
        add(N + rq, iL, sq * g_el * (-1.0 / dx))
        add(N + rq, iR, sq * g_el * (+1.0 / dx))
        # q' Q_bar dp
        for b, nodesp in ((0, iL), (1, iR)):
            add(N + rq, N + nodesp, sq * (q_el2 @ gphi[b]))

    rows = np.concatenate([np.asarray(r) for r in rows])
    cols = np.concatenate([np.asarray(c) for c in cols])
    vals = np.concatenate([np.broadcast_to(v, (ne,)) if np.ndim(v) == 0 else v
                           for v in vals])
    return sp.coo_matrix((vals, (rows, cols)), shape=(2 * N, 2 * N)).tocsr()


def newton_time_step(prev: MacroState, cfg: MacroConfig, grid: _Grid, t: float,
                     run_ref: float = 0.0):
    """One backward-Euler step solved by Newton iteration; returns the
    converged state, the iteration count and the residual norms.

    Convergence is relative to the step's first residual, with an absolute
    floor tied to the run's largest first residual (run_ref): a step whose
    state is already converged to roundoff would otherwise never satisfy a
    purely relative criterion.
    """
    state = prev.copy()
    state.u[0] = 0.0
    state.p[0] = cfg.P1
    state.p[-1] = cfg.P2
    free = grid.free

    history = []
    ref = None
    for it in range(1, cfg.max_iter + 1):
        R = assemble_residual(state, prev, cfg, grid, t)
        rnorm = float(np.linalg.norm(R[free]))
        history.append(rnorm)
        if ref is None:
            ref = rnorm
        # steps starting from an already-steady state have a first residual
        # far below the run scale; tie the floor to the run's largest step
        # so such steps converge at the assembly-roundoff level
        threshold = cfg.newton_tol * max(ref, 0.01 * run_ref, 1e-300)
        if rnorm <= threshold and it > 1:
            return state, it - 1, history
        T = assemble_tangent(state, prev, cfg, grid, t)
        Tff = T[free][:, free].tocsc()
        try:
            delta = spla.spsolve(Tff, -R[free])
        except RuntimeError as exc:
            raise LinearSolveFailure("tangent solve failed: %s" % exc) from None
        if not np.all(np.isfinite(delta)):
            raise LinearSolveFailure("tangent solve produced non-finite update")
        full = np.zeros(2 * grid.N)
        full[free] = delta
        state.u += full[:grid.N]
        state.p += full[grid.N:]
        R2 = assemble_residual(state, prev, cfg, grid, t)
        r2 = float(np.linalg.norm(R2[free]))
        if r2 <= threshold:
            history.append(r2)
            return state, it, history
    raise NewtonDivergence("Newton did not converge in %d iterations "
                           "(last residual %g, first %g)"
                           % (cfg.max_iter, history[-1], history[0]))


def _seepage(state: MacroState, cfg: MacroConfig, grid: _Grid, t: float):
    """w = -(K~/mu) dp/dx per element and its nodal average."""
    e, pg = _gauss_state(grid, state)
    phi = cfg.wave(grid.xg, t)
    Kt = _expanded(cfg, "K", e, pg, phi)
    dpdx = np.diff(state.p) / grid.dx
    ff_el = _force_at(cfg.f_f, grid.xg).mean(axis=1)
    w_el = -(Kt.mean(axis=1) / cfg.coeffs.mu_bar) * (dpdx - ff_el)
    w_nodes = np.empty(grid.N)
    w_nodes[0] = w_el[0]
    w_nodes[-1] = w_el[-1]
    w_nodes[1:-1] = 0.5 * (w_el[:-1] + w_el[1:])
    return w_el, w_nodes


def _variational_fluxes(state: MacroState, prev: MacroState, cfg: MacroConfig,
                        grid: _Grid, t: float):
    """Exactly conservative discrete seepage at the ends and midpoint.

    The mass-equation residual rows of the converged state hold the natural
    boundary fluxes: summing rows over a subdomain telescopes the interior
    flux terms, so the extracted fluxes satisfy the discrete mass budget
    without the O(dx) bias of evaluating K~ p' pointwise.
    """
    N = grid.N
    R = assemble_residual(state, prev, cfg, grid, t)
    rmass = R[N:]
    w0 = rmass[0] / cfg.dt
    wL = -rmass[-1] / cfg.dt
    mid = (N - 1) // 2
    w_mid = wL - rmass[mid:].sum() / cfg.dt
    return w0, w_mid, wL


def equilibrate_displacement(state: MacroState, cfg: MacroConfig, grid: _Grid,
                             t: float) -> MacroState:
    """Solve the quasi-static momentum equation for u at fixed p."""
    free = grid.free.copy()
    free[grid.N:] = False  # pressure held at its current values
    out = state.copy()
    ref = None
    for it in range(cfg.max_iter):
        R = assemble_residual(out, state, cfg, grid, t)
        rnorm = float(np.linalg.norm(R[free]))
        ref = rnorm if ref is None else ref
        if rnorm <= cfg.newton_tol * max(ref, 1e-300):
            return out
        T = assemble_tangent(out, state, cfg, grid, t)
        delta = spla.spsolve(T[free][:, free].tocsc(), -R[free])
        if not np.all(np.isfinite(delta)):
            raise LinearSolveFailure("equilibration solve produced non-finite update")
        full = np.zeros(2 * grid.N)
        full[free] = delta
        out.u += full[:grid.N]
    raise NewtonDivergence("initial equilibration did not converge")


def run_simulation(cfg: MacroConfig) -> TimeSeries:
    cfg.validate()
    grid = _Grid(cfg)
    N = grid.N
    state = MacroState(np.zeros(N), np.zeros(N))
    if cfg.equilibrate_initial:
        state = equilibrate_displacement(state, cfg, grid, t=0.0)

    times = np.zeros(cfg.N_t + 1)
    w_minus = np.zeros(cfg.N_t + 1)
    w_mid = np.zeros(cfg.N_t + 1)
    w_plus = np.zeros(cfg.N_t + 1)
    iters = np.zeros(cfg.N_t, dtype=int)
    histories = []
    snapshots = {}

    mid = (N - 1) // 2
    snapshots[0] = {"u": state.u.copy(), "p": state.p.copy(),
                    "w": np.zeros(N)}

    run_ref = 0.0
    for k in range(1, cfg.N_t + 1):
        t = k * cfg.dt
        times[k] = t
        prev = state
        state, nit, hist = newton_time_step(state, cfg, grid, t, run_ref)
        run_ref = max(run_ref, hist[0])
        iters[k - 1] = nit
        histories.append(hist)
        w_minus[k], w_mid[k], w_plus[k] = _variational_fluxes(
            state, prev, cfg, grid, t)
        _, w_nodes = _seepage(state, cfg, grid, t)
        if cfg.stride and (k % cfg.stride == 0 or k == cfg.N_t):
            snapshots[k] = {"u": state.u.copy(), "p": state.p.copy(),
                            "w": w_nodes.copy()}

    return TimeSeries(times, grid.x, w_minus, w_mid, w_plus, iters,
                      histories, snapshots)


def cumulative_flux(series: TimeSeries, endpoint: str):
    """Q(t) = cumulative +x transport at 'minus' | 'mid' | 'plus' by the
    trapezoid rule, plus the regression slope over the second half."""
    w = {"minus": series.w_minus, "mid": series.w_mid,
         "plus": series.w_plus}[endpoint]
    t = series.times
    Q = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(t))])
    return Q, regression_slope(t, Q)


def regression_slope(t: np.ndarray, Q: np.ndarray, window: float = 0.5) -> float:
    """Least-squares slope of Q over the trailing fraction of the run."""
    sel = t >= (1.0 - window) * t[-1]
    if sel.sum() < 2:
        return 0.0
    return float(np.polyfit(t[sel], Q[sel], 1)[0])


# ---------------------------------------------------------------------------
# IO

def write_fluxes_csv(series: TimeSeries, path) -> None:
    Qm, _ = cumulative_flux(series, "minus")
    QM, _ = cumulative_flux(series, "mid")
    Qp, _ = cumulative_flux(series, "plus")
    iters = np.concatenate([[0], series.iters])
    arr = np.column_stack([series.times, Qm, QM, Qp, iters])
    header = "# schema: %s\nt,Q_minus,Q_mid,Q_plus,newton_iters" % FLUX_SCHEMA
    np.savetxt(path, arr, delimiter=",", header=header, comments="")


def write_fields_csv(series: TimeSeries, k: int, path) -> None:
    snap = series.snapshots[k]
    arr = np.column_stack([series.x, snap["u"], snap["p"], snap["w"]])
    header = "# schema: %s\n# t = %.17g\nx,u,p,w" % (FIELDS_SCHEMA, series.times[k])
    np.savetxt(path, arr, delimiter=",", header=header, comments="")


def summary_doc(series: TimeSeries) -> dict:
    out = {"schema": "pzpump.summary.v1"}
    for end in ("minus", "mid", "plus"):
        Q, slope = cumulative_flux(series, end)
        out["Q_%s_final" % end] = float(Q[-1])
        out["slope_%s" % end] = slope
    out["newton_iters_max"] = int(series.iters.max()) if series.iters.size else 0
    out["newton_iters_mean"] = float(series.iters.mean()) if series.iters.size else 0.0
    return out


def config_from_doc(doc: dict, base_dir=None) -> MacroConfig:
    """Build a MacroConfig from a flat JSON document; the coefficient source
    is either explicit scalars or a homogenization report path."""
    import os

    coeffs = doc.get("coefficients")
    if coeffs is None:
        raise ConfigError("config misses 'coefficients'")
    grads = Grads1D.from_doc(doc["gradients"]) if "gradients" in doc else Grads1D()
    if isinstance(coeffs, dict) and "report" in coeffs:
        from . import homogenization as hg
        from . import sensitivity as sn
        path = coeffs["report"]
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        electrode = int(coeffs.get("electrode", 2))
        try:
            with open(path) as f:
                report = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("cannot read coefficient report %s: %s"
                              % (path, exc)) from None
        c1d = Coeffs1D.from_hom(hg.coefficients_from_doc(report), electrode)
        if "gradients" in report and "gradients" not in doc:
            grads = Grads1D.from_doc(
                sn.reduce_gradient_doc(report["gradients"], electrode))
    elif isinstance(coeffs, dict):
        c1d = Coeffs1D.from_doc(coeffs)
    else:
        raise ConfigError("'coefficients' must be an object")
    wave = ControlWave.from_doc(doc.get("wave", {"mode": "abs_sine", "phi0": 0.0,
                                                 "omega": 0.0, "k": 0.0}))
    cfg = MacroConfig(
        L=float(doc.get("L", 1.0)),
        N_x=int(doc.get("N_x", 201)),
        dt=float(doc.get("dt", 0.02)),
        N_t=int(doc.get("N_t", 50)),
        P1=float(doc.get("P1", 0.0)),
        P2=float(doc.get("P2", 0.0)),
        wave=wave,
        coeffs=c1d,
        grads=grads,
        mode=str(doc.get("mode", "semilinear")),
        newton_tol=float(doc.get("newton_tol", 1e-8)),
        max_iter=int(doc.get("max_iter", 20)),
        f_s=float(doc.get("f_s", 0.0)),
        f_f=float(doc.get("f_f", 0.0)),
        stride=int(doc.get("stride", 10)),
        h_sign=float(doc.get("h_sign", 1.0)),
        equilibrate_initial=bool(doc.get("equilibrate_initial", False)),
    )
    return cfg.validate()
