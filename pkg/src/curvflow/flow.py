"""Explicit time integration of the scalar graph flow.

The graph x0 = u(t, x) evolves on a fixed base grid by

    du/dt = -e^{-psi} v (Phi(F) - Phi(f)),

which is the normal flow x_dot = -sigma (Phi - f~) nu written in fixed grid
labels.  The same scalar form serves both signatures.  Differentiating the
right side in u_ij gives the principal coefficient Phi' F^{ij}, which sets the
parabolic step size.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import grid as gridmod
from .ambient import LORENTZIAN, AmbientModel, ambient_fields
from .curvfunc import CurvatureSpec, DeformSpec, F_eval, fij_field, phi_eval
from .errors import (Diverged, LostAdmissibility, LostSpacelike, MeanCurvatureFloor,
                     NonPositiveArgument, NonPositiveSliceH, NotSpacelike, OutOfRange, OutsideCone, StepUnderflow,
                     UnsupportedModel, WrongSignature)
from .geometry import (GraphGeometry, GraphState, admissible, cone_margin, geometry_from_jets,
                       geometry_of, graph_geometry)

TRACE_COLUMNS = ("t", "dt", "sup_residual", "min_residual", "kappa_min", "kappa_max",
                 "vtilde_max", "volume", "cone_margin")
IMCF_COLUMNS = TRACE_COLUMNS + ("volume_law_error",)
IDENTITIES = ("metric", "normal", "shape", "vtilde", "speed")

# |eigenvalue| of the discrete second derivative, in units of 1/h^2
_SPECTRAL_RADIUS = {2: 4.0, 4: 16.0 / 3.0}


@dataclass(frozen=True)
class FlowConfig:
    cfl: float = 0.25
    tol_stationary: float = 1e-8
    max_steps: int = 20000
    dt_min: float = 1e-12
    dt_max: float = math.inf
    output_every: int = 1
    monitors: bool = True
    H_floor: float = 1e-6
    seed: int = 20240601
    t_end: float | None = None
    guard_fraction: float = 0.1
    burn_in: int = 10
    max_abs_u: float = 1e6

    def __post_init__(self):
        if not 0 < self.cfl <= 0.5:
            raise ValueError("cfl must lie in (0, 0.5]")
        for name in ("tol_stationary", "dt_min", "dt_max", "H_floor", "guard_fraction",
                     "max_abs_u"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min exceeds dt_max")
        if self.max_steps < 1 or self.output_every < 1:
            raise ValueError("max_steps and output_every must be at least 1")
        if self.t_end is not None and not self.t_end > 0:
            raise ValueError("t_end must be positive")


@dataclass(frozen=True, eq=False)
class PrescribedCurvature:
    """Right-hand side f on the ambient space with its partial derivatives.

    ``jet_fn`` maps points X (N, n+1) to (f, df, ddf) with shapes (N,),
    (N, n+1), (N, n+1, n+1).  ``nu_fn`` optionally adds a dependence on the
    normal, f(X, nu); the stepper uses it, the identity suite refuses it.
    """

    name: str
    params: dict
    jet_fn: Callable
    nu_fn: Callable | None = None

    @staticmethod
    def constant(c: float) -> "PrescribedCurvature":
        c = float(c)

        def jet(X):
            N, D = X.shape
            return np.full(N, c), np.zeros((N, D)), np.zeros((N, D, D))

        return PrescribedCurvature("constant", {"value": c}, jet)

    @staticmethod
    def radial_power(c: float, r0: float, p: float) -> "PrescribedCurvature":
        """f = c (r0 / x0)^p; for p > 1 the sphere x0 = r0 attracts the H-flow."""
        c, r0, p = float(c), float(r0), float(p)

        def jet(X):
            N, D = X.shape
            r = X[:, 0]
            f = c * (r0 / r) ** p
            df = np.zeros((N, D))
            ddf = np.zeros((N, D, D))
            df[:, 0] = -p * f / r
            ddf[:, 0, 0] = p * (p + 1) * f / r ** 2
            return f, df, ddf

        return PrescribedCurvature("radial-power", {"value": c, "r0": r0, "p": p}, jet)

    def jet(self, X):
        return self.jet_fn(np.atleast_2d(np.asarray(X, dtype=float)))

    def values(self, geo: GraphGeometry) -> np.ndarray:
        if self.nu_fn is not None:
            return np.asarray(self.nu_fn(geo.points, geo.nu), dtype=float)
        return self.jet(geo.points)[0]


def ftilde_jet(f: PrescribedCurvature | None, deform: DeformSpec, geo: GraphGeometry):
    """Phi(f) with its partials and ambient covariant Hessian; zero when f is None."""
    N, D = geo.points.shape
    if f is None:
        return np.zeros(N), np.zeros((N, D)), np.zeros((N, D, D))
    fv, df, ddf = f.jet(geo.points)
    p0, p1, p2 = phi_eval(deform, fv)
    dft = p1[:, None] * df
    dd = p2[:, None, None] * df[:, :, None] * df[:, None, :] + p1[:, None, None] * ddf
    dd = dd - np.einsum("nmab,nm->nab", geo.amb.gamma, dft)
    return p0, dft, dd


@dataclass(eq=False)
class FlowTrace:
    columns: tuple
    rows: list = field(default_factory=list)
    monitors: dict = field(default_factory=dict)

    def append(self, row) -> None:
        row = tuple(float(x) for x in row)
        if len(row) != len(self.columns):
            raise ValueError("row length does not match columns")
        if self.rows and not row[0] > self.rows[-1][0]:
            raise ValueError("trace times must increase strictly")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([format(x, ".17g") for x in r])
        return buf.getvalue()


@dataclass(eq=False)
class _Eval:
    """Geometry of a state together with everything the stepper derives from it."""

    geo: GraphGeometry
    F: np.ndarray
    dPhi: np.ndarray
    w: np.ndarray
    velocity: np.ndarray


def _evaluate(u, model, grid, spec, deform, f) -> _Eval:
    with np.errstate(over="ignore", invalid="ignore"):
        geo = graph_geometry(model, grid, u)
        if not np.all(np.isfinite(geo.kappa)):
            raise Diverged("curvature is no longer finite")
        F = F_eval(spec, geo.kappa)[0]
        Phi, dPhi, _ = phi_eval(deform, F)
        ft = np.zeros_like(Phi) if f is None else phi_eval(deform, f.values(geo))[0]
        w = Phi - ft
        vel = -np.exp(-geo.amb.psi) * geo.v * w
    if not np.all(np.isfinite(vel)):
        raise Diverged("flow speed is no longer finite")
    return _Eval(geo, F, dPhi, w, vel)


def stable_dt(ev: _Eval, spec: CurvatureSpec, grid, cfl: float) -> float:
    """Parabolic step limit for Heun on the principal part Phi' F^{ij} d_ij.

    With rho the spectral radius of the second-difference stencil and m active
    axes, cfl = 0.5 reaches the real-axis stability bound of the scheme.  The
    axisymmetric sphere gets an extra factor 2 for the pole, where the polar
    Laplacian behaves like a two-dimensional one.
    """
    A = ev.dPhi[:, None, None] * fij_field(spec, ev.geo.g, ev.geo.h)
    m = grid.active
    lam = float(np.linalg.eigvalsh(A[:, :m, :m])[:, -1].max())
    if lam <= 0:
        return math.inf
    lam_eff = lam * _SPECTRAL_RADIUS[grid.order] * m / 4.0
    if grid.topology == "sphere-axisym":
        lam_eff *= 2.0
    return cfl * min(grid.h) ** 2 / lam_eff


_ADMISSIBILITY = (OutsideCone, NonPositiveArgument, OutOfRange)


def _heun(state: GraphState, ev: _Eval, dt: float, spec, deform, f) -> _Eval:
    u1 = state.u + dt * ev.velocity
    if not np.all(np.isfinite(u1)):
        raise Diverged(f"non-finite height after a step of {dt:.3g} at t={state.t}")
    ev1 = _evaluate(u1, state.model, state.grid, spec, deform, f)
    u2 = state.u + 0.5 * dt * (ev.velocity + ev1.velocity)
    return _evaluate(u2, state.model, state.grid, spec, deform, f)


def _advance(state: GraphState, ev: _Eval, spec, deform, f, config: FlowConfig,
             dt: float | None = None):
    """One guarded Heun step; returns (new state, its evaluation, dt used, retries)."""
    if dt is None:
        dt = min(config.dt_max, stable_dt(ev, spec, state.grid, config.cfl))
    if not (math.isfinite(dt) and math.isfinite(state.t + dt)):
        raise Diverged(f"step size {dt:.3g} is not finite at t={state.t}")
    if config.t_end is not None:
        dt = min(dt, config.t_end - state.t)
    margin = cone_margin(ev.geo.kappa, spec.cone)
    retries = 0
    last = None
    while dt >= config.dt_min:
        try:
            new = _heun(state, ev, dt, spec, deform, f)
        except _ADMISSIBILITY as exc:
            last = exc
        except NotSpacelike as exc:
            last = exc
        else:
            if math.isfinite(margin):
                change = np.abs(new.geo.kappa[:, 0] - ev.geo.kappa[:, 0]).max()
                if change < config.guard_fraction * margin:
                    break
                last = None
            else:
                break
        dt *= 0.5
        retries += 1
    else:
        if isinstance(last, NotSpacelike):
            raise LostSpacelike(f"graph stopped being spacelike at t={state.t}")
        if last is not None:
            raise LostAdmissibility(f"curvature left the {spec.cone} cone at t={state.t}: {last}")
        raise StepUnderflow(f"dt fell below dt_min={config.dt_min} at t={state.t}")
    t_new = state.t + dt
    if t_new == state.t:
        raise Diverged(f"time step {dt:.3g} no longer advances t={state.t}")
    if np.abs(new.geo.u).max() > config.max_abs_u:
        raise Diverged(f"|u| exceeded {config.max_abs_u:.3g} at t={t_new}")
    if config.t_end is not None and abs(t_new - config.t_end) <= 1e-12 * max(1.0, config.t_end):
        t_new = config.t_end
    return state.with_u(new.geo.u, t_new), new, dt, retries


def step(state: GraphState, spec: CurvatureSpec, deform: DeformSpec,
         f: PrescribedCurvature | None, config: FlowConfig = FlowConfig(),
         dt: float | None = None):
    """Advance one Heun step; ``dt`` overrides the stability-limited choice."""
    try:
        ev = _evaluate(state.u, state.model, state.grid, spec, deform, f)
    except _ADMISSIBILITY as exc:
        raise LostAdmissibility(str(exc)) from exc
    except NotSpacelike as exc:
        raise LostSpacelike(str(exc)) from exc
    new_state, _, used, _ = _advance(state, ev, spec, deform, f, config, dt)
    return new_state, used


def volume(state: GraphState) -> float:
    """Area of the graph from v sqrt(det sigma_ij(u, x)), including the symmetry fibre."""
    geo = geometry_of(state)
    return _volume(geo, state.grid)


def induced_volume(state: GraphState) -> float:
    """Area from sqrt(det g_ij); equals volume() up to rounding."""
    geo = geometry_of(state)
    return state.grid.fiber_measure * gridmod.integrate(geo.sqrt_g, state.grid)


def _volume(geo: GraphGeometry, grid) -> float:
    dens = geo.area_density * np.exp(geo.n * geo.amb.psi)
    return grid.fiber_measure * gridmod.integrate(dens, grid)


def _trace_row(t, dt, ev: _Eval, spec, grid):
    geo = ev.geo
    vt = geo.vtilde if geo.sigma == LORENTZIAN else geo.v
    return (t, dt, np.abs(ev.w).max(), ev.w.min(), geo.kappa.min(), geo.kappa.max(),
            vt.max(), _volume(geo, grid), cone_margin(geo.kappa, spec.cone))


def run(state: GraphState, spec: CurvatureSpec, deform: DeformSpec,
        f: PrescribedCurvature | None, config: FlowConfig = FlowConfig(),
        columns=TRACE_COLUMNS, extra=None):
    """Iterate to stationarity, max_steps or t_end.

    Returns (final state, trace, verdict) with verdict one of "converged",
    "max_steps" or "t_end".  The trace's ``monitors`` record the sign,
    monotonicity and gradient-bound checks.
    """
    trace = FlowTrace(tuple(columns))
    try:
        ev = _evaluate(state.u, state.model, state.grid, spec, deform, f)
    except _ADMISSIBILITY as exc:
        raise LostAdmissibility(str(exc), trace) from exc
    except NotSpacelike as exc:
        raise LostSpacelike(str(exc), trace) from exc

    def record(st, dt, e):
        row = _trace_row(st.t, dt, e, spec, st.grid)
        if extra is not None:
            row = row + tuple(extra(st, e))
        trace.append(row)

    record(state, 0.0, ev)
    upper = bool(ev.w.min() >= 0.0)
    lower = bool(ev.w.max() <= 0.0)
    direction = -1 if upper and not lower else (1 if lower and not upper else 0)
    mon = {"upper_start": upper, "lower_start": lower, "direction": direction,
           "min_residual": float(ev.w.min()), "sign_ok": True, "monotone_violation": 0.0,
           "monotone_ok": True, "gradient_max": float(ev.geo.grad2.max()),
           "gradient_ok": True, "guard_retries": 0, "steps": 0}
    trace.monitors = mon
    grad_running = mon["gradient_max"]
    verdict = "max_steps"
    steps = 0
    last_recorded = 0
    while True:
        if np.abs(ev.w).max() < config.tol_stationary:
            verdict = "converged"
            break
        if config.t_end is not None and state.t >= config.t_end:
            verdict = "t_end"
            break
        if steps >= config.max_steps:
            break
        try:
            new_state, new_ev, dt, retries = _advance(state, ev, spec, deform, f, config)
        except (LostAdmissibility, LostSpacelike, StepUnderflow, Diverged) as exc:
            exc.trace = trace
            raise
        steps += 1
        mon["guard_retries"] += retries
        if config.monitors:
            if upper:
                mon["min_residual"] = min(mon["min_residual"], float(new_ev.w.min()))
                mon["sign_ok"] = mon["min_residual"] >= -1e-8
            if direction:
                viol = float((direction * (state.u - new_state.u)).max())
                mon["monotone_violation"] = max(mon["monotone_violation"], viol)
                mon["monotone_ok"] = mon["monotone_violation"] <= 1e-10
            gmax = float(new_ev.geo.grad2.max())
            if steps > config.burn_in and gmax > 2.0 * max(grad_running, 1e-300):
                mon["gradient_ok"] = False
            grad_running = max(grad_running, gmax)
            mon["gradient_max"] = grad_running
        state, ev = new_state, new_ev
        if steps % config.output_every == 0:
            record(state, dt, ev)
            last_recorded = steps
    if last_recorded != steps:
        record(state, dt, ev)
    mon["steps"] = steps
    return state, trace, verdict


# --- inverse mean curvature flow ---------------------------------------------------

IMCF_SPEC_DEFORM = DeformSpec("neg-inverse")


@dataclass(eq=False)
class VolumeLawReport:
    M0: float
    max_error: float
    table: list            # rows (t, tau, |M|/|M0|, (1 - tau)^n, relative deviation)
    table_deviation: float
    final_state: GraphState
    verdict: str


def imcf_run(state: GraphState, config: FlowConfig = FlowConfig(t_end=1.0)):
    """Inverse mean curvature flow du/dt = e^{-psi} v / H until config.t_end.

    Returns (trace, report).  The trace carries the extra column
    volume_law_error = | |M(t)| e^t / |M0| - 1 |; the report tabulates
    |M|/|M0| against (1 - tau)^n with tau = 1 - e^{-t/n}.
    """
    if state.model.signature != LORENTZIAN:
        raise WrongSignature("IMCF is run in Lorentzian models")
    if config.t_end is None:
        raise ValueError("imcf_run needs config.t_end")
    n = state.model.base_dim
    spec = CurvatureSpec("H", n)
    geo = geometry_of(state)
    if geo.H.min() <= config.H_floor:
        raise MeanCurvatureFloor(f"min H = {geo.H.min():.3g} <= H_floor")
    M0 = _volume(geo, state.grid)

    def law(st, e):
        if e.F.min() <= config.H_floor:
            raise MeanCurvatureFloor(f"min H = {e.F.min():.3g} <= H_floor at t={st.t}")
        return (abs(_volume(e.geo, st.grid) * math.exp(st.t) / M0 - 1.0),)

    final, trace, verdict = run(state, spec, IMCF_SPEC_DEFORM, None, config,
                                columns=IMCF_COLUMNS, extra=law)
    t = trace.column("t")
    ratio = trace.column("volume") / M0
    tau = 1.0 - np.exp(-t / n)
    expected = (1.0 - tau) ** n
    dev = np.abs(ratio / expected - 1.0)
    table = [tuple(float(x) for x in r) for r in zip(t, tau, ratio, expected, dev)]
    report = VolumeLawReport(M0, float(trace.column("volume_law_error").max()), table,
                             float(dev.max()), final, verdict)
    return trace, report


def homogeneous_imcf_solution(T: float, n: int, u0: float, t):
    """Closed-form IMCF height for constant slices of the collapsing FLRW model."""
    return T - (T - u0) * np.exp(-np.asarray(t, dtype=float) / n)


# --- barriers --------------------------------------------------------------------

@dataclass(frozen=True)
class BarrierReport:
    kind: str          # "upper", "lower", "stationary" or "neither"
    margin: float


def barrier_classify(state: GraphState, spec: CurvatureSpec, deform: DeformSpec,
                     f: PrescribedCurvature) -> BarrierReport:
    """Compare F with f pointwise.

    An upper barrier must be admissible everywhere with F >= f; a lower barrier
    only needs F <= f where it is admissible (possibly nowhere).  ``deform`` is
    accepted for a uniform call signature; the comparison is unaffected by a
    monotone Phi.
    """
    geo = geometry_of(state)
    fv = f.values(geo)
    adm = np.asarray(admissible(geo.kappa, spec.cone), dtype=bool)
    F = np.where(adm, F_eval(spec, geo.kappa, check=False)[0], np.nan)
    diff = F - fv
    if adm.all():
        if np.abs(diff).max() < 1e-10:
            return BarrierReport("stationary", float(np.abs(diff).max()))
        if diff.min() >= -1e-12:
            return BarrierReport("upper", float(diff.min()))
    sub = diff[adm]
    if sub.size == 0:
        return BarrierReport("lower", math.inf)
    if sub.max() <= 1e-12:
        return BarrierReport("lower", float(-sub.max()))
    return BarrierReport("neither", float(np.abs(diff[adm]).max()))


# --- evolution identities ----------------------------------------------------------

@dataclass(frozen=True)
class IdentityEntry:
    name: str
    residual: float
    residual_half: float

    @property
    def ratio(self) -> float:
        if self.residual_half == 0.0:
            return math.inf if self.residual > 0 else 1.0
        return self.residual / self.residual_half


@dataclass(frozen=True)
class IdentityReport:
    dt_probe: float
    scheme: str
    entries: dict
    skipped: tuple

    def table(self):
        return [(e.name, e.residual, e.residual_half, e.ratio) for e in self.entries.values()]


def _eta_fields(amb, second):
    """Covariant derivatives of the time form eta = e^psi (-1, 0, ..., 0)."""
    N, D = amb.psi.shape[0], amb.G.shape[1]
    ep = np.exp(amb.psi)
    eta = np.zeros((N, D))
    eta[:, 0] = -ep
    d_eta = np.zeros((N, D, D))            # [n, a, b] = d_b eta_a
    d_eta[:, 0, :] = -ep[:, None] * amb.dpsi
    eta1 = d_eta - np.einsum("nmab,nm->nab", amb.gamma, eta)
    if not second:
        return eta, eta1, None
    dd_eta = np.zeros((N, D, D, D))        # [n, a, b, c] = d_c d_b eta_a
    dd_eta[:, 0] = -ep[:, None, None] * (amb.dpsi[:, :, None] * amb.dpsi[:, None, :] + amb.d2psi)
    # d_c eta_ab with eta_ab = d_b eta_a - Gamma^m_ab eta_m
    d_eta1 = (dd_eta - np.einsum("nmabc,nm->nabc", amb.dgamma, eta)
              - np.einsum("nmab,nmc->nabc", amb.gamma, d_eta))
    eta2 = (d_eta1 - np.einsum("nmac,nmb->nabc", amb.gamma, eta1)
            - np.einsum("nmbc,nam->nabc", amb.gamma, eta1))
    return eta, eta1, eta2


def _lie_scalar(grid, q, X):
    return np.einsum("n...k,nk->n...", gridmod.gradient(grid, q), X)


def _mixed_covariant(grid, M, chris):
    """Covariant derivative of a mixed tensor M^a_b, result [n, a, b, k]."""
    dM = gridmod.gradient(grid, M)
    return (dM + np.einsum("nakl,nlb->nabk", chris, M)
            - np.einsum("nlkb,nal->nabk", chris, M))


class _Probe:
    """Everything the identities need at one instant."""

    def __init__(self, u, model, grid, spec, deform, f):
        self.ev = _evaluate(u, model, grid, spec, deform, f)
        self.geo = self.ev.geo


def identity_residuals(state: GraphState, spec: CurvatureSpec, deform: DeformSpec,
                       f: PrescribedCurvature | None, dt_probe: float,
                       scheme: str = "forward", identities=None) -> IdentityReport:
    """Residuals of the evolution equations for g, nu, h^j_i, v~ and Phi - f~.

    Time derivatives follow each point along the normal motion; on the fixed
    grid this is the difference quotient plus the Lie transport by the
    tangential label velocity X^k = -sigma (Phi - f~) nu^k.  ``scheme`` is
    "forward" (first order in dt_probe) or "central" (second order).  Each
    identity is evaluated at dt_probe and dt_probe / 2.
    """
    if scheme not in ("forward", "central"):
        raise ValueError("scheme must be 'forward' or 'central'")
    if state.grid.topology == "sphere-axisym":
        raise UnsupportedModel("identity suite needs a periodic base grid")
    if f is not None and f.nu_fn is not None:
        raise UnsupportedModel("normal-dependent f is outside the identity suite")
    model = state.model
    applicable = ["metric", "normal", "speed"]
    skipped = []
    if model.spaceform_K is not None:
        applicable.insert(2, "shape")
    else:
        skipped.append("shape")
    if model.signature == LORENTZIAN:
        applicable.insert(len(applicable) - 1, "vtilde")
    else:
        skipped.append("vtilde")
    if identities is None:
        wanted = applicable
    else:
        bad = [k for k in identities if k not in applicable]
        if bad:
            raise UnsupportedModel(f"identities {bad} do not apply to {model.model_id}")
        wanted = [k for k in IDENTITIES if k in identities]
    rhs = _identity_rhs(state, spec, deform, f, wanted)
    first = _identity_lhs(state, spec, deform, f, dt_probe, scheme, wanted, rhs)
    half = _identity_lhs(state, spec, deform, f, 0.5 * dt_probe, scheme, wanted, rhs)
    entries = {k: IdentityEntry(k, first[k], half[k]) for k in wanted}
    return IdentityReport(dt_probe, scheme, entries, tuple(skipped))


def _identity_rhs(state, spec, deform, f, wanted):
    grid, model = state.grid, state.model
    P = _Probe(state.u, model, grid, spec, deform, f)
    geo, ev = P.geo, P.ev
    sig = geo.sigma
    N, n = geo.g.shape[:2]
    F = ev.F
    _, dPhi, ddPhi = phi_eval(deform, F)
    Fij = fij_field(spec, geo.g, geo.h)
    A = dPhi[:, None, None] * Fij                     # Phi' F^{ij}
    w = ev.w
    ft, dft, ddft = ftilde_jet(f, deform, geo)
    chris = geo.christoffel()
    M = geo.shape_op                                   # h^a_b
    hh = np.einsum("nik,nkj->nij", geo.h, M)           # h_ik h^k_j
    X = -sig * w[:, None] * geo.nu[:, 1:]
    out = {"X": X, "geo": geo, "w": w}
    d0 = spec.degree
    if "metric" in wanted:
        out["metric"] = -2 * sig * w[:, None, None] * geo.h
    if "normal" in wanted:
        dw = gridmod.gradient(grid, w)
        out["normal"] = np.einsum("nij,ni,nja->na", geo.ginv, dw, geo.tangents)
    if "shape" in wanted:
        K = model.spaceform_K
        cov = _mixed_covariant(grid, M, chris)                       # h^a_{b;k}
        dcov = gridmod.gradient(grid, cov)                           # d_l
        cov2 = (dcov + np.einsum("nalm,nmbk->nabkl", chris, cov)
                - np.einsum("nmlb,namk->nabkl", chris, cov)
                - np.einsum("nmlk,nabm->nabkl", chris, cov))
        r = np.einsum("nkl,nabkl->nab", A, cov2)
        r += sig * np.einsum("nkl,nkl->n", A, hh)[:, None, None] * M
        MM = np.einsum("nak,nkb->nab", M, M)
        r -= sig * (dPhi * d0 * F)[:, None, None] * MM
        r += sig * w[:, None, None] * MM
        B = np.einsum("nab,nia,nkb->nik", ddft, geo.tangents, geo.tangents)
        r -= np.einsum("njk,nki->nji", geo.ginv, B)
        r += sig * np.einsum("na,na->n", dft, geo.nu)[:, None, None] * M
        # second derivatives of F in h along the Codazzi directions
        hlow = (gridmod.gradient(grid, geo.h)
                - np.einsum("nmik,nml->nkli", chris, geo.h)
                - np.einsum("nmil,nkm->nkli", chris, geo.h))          # h_{kl;i}
        hup = np.einsum("njm,nrsm->nrsj", geo.ginv, hlow)
        eps = 1e-5 * max(1.0, float(np.abs(geo.h).max()))
        for j in range(n):
            Bj = hup[..., j]
            scale = eps / max(float(np.abs(Bj).max()), 1e-300)
            dF = (fij_field(spec, geo.g, geo.h + scale * Bj)
                  - fij_field(spec, geo.g, geo.h - scale * Bj)) / (2 * scale)
            r[:, j, :] += dPhi[:, None] * np.einsum("nkl,nkli->ni", dF, hlow)
        dF_sp = gridmod.gradient(grid, F)
        dF_up = np.einsum("njk,nk->nj", geo.ginv, dF_sp)
        r += ddPhi[:, None, None] * dF_up[:, :, None] * dF_sp[:, None, :]
        trA = np.einsum("nkl,nkl->n", A, geo.g)
        eye = np.eye(n)[None]
        r += K * ((w + dPhi * d0 * F)[:, None, None] * eye - trA[:, None, None] * M)
        out["shape"] = r
    if "vtilde" in wanted or "speed" in wanted:
        curv = geo.curvature_fields()
    if "vtilde" in wanted:
        eta, eta1, eta2 = _eta_fields(curv, second=True)
        vt = geo.vtilde
        T = geo.tangents
        nu = geo.nu
        r = -np.einsum("nij,nij->n", A, hh) * vt
        r += (w - dPhi * d0 * F) * np.einsum("nab,na,nb->n", eta1, nu, nu)
        r -= 2 * np.einsum("nij,nkj,nia,nkb,nab->n", A, M, T, T, eta1)
        r -= np.einsum("nij,nabc,nib,njc,na->n", A, eta2, T, T, nu)
        Rm = curv.riemann
        etaT = np.einsum("ne,nle->nl", eta, T)
        r -= np.einsum("nij,nabcd,na,nib,nkc,njd,nl,nkl->n", A, Rm, nu, T, T, T, etaT, geo.ginv,
                       optimize=True)
        r -= np.einsum("nb,nib,nka,na,nik->n", dft, T, T, eta, geo.ginv)
        out["vtilde"] = r
        out["A"] = A
    if "speed" in wanted:
        RN = geo.normal_riemann()
        r = sig * np.einsum("nij,nij->n", A, hh) * w
        r += sig * np.einsum("na,na->n", dft, geo.nu) * w
        r += sig * np.einsum("nij,nij->n", A, RN) * w
        out["speed"] = r
        out["A"] = A
    return out


def _fixed_heun(u, model, grid, spec, deform, f, dt):
    ev = _evaluate(u, model, grid, spec, deform, f)
    ev1 = _evaluate(u + dt * ev.velocity, model, grid, spec, deform, f)
    return u + 0.5 * dt * (ev.velocity + ev1.velocity)


def _identity_lhs(state, spec, deform, f, dt, scheme, wanted, rhs):
    grid, model = state.grid, state.model
    geo0 = rhs["geo"]
    X = rhs["X"]
    sig = geo0.sigma
    up = _fixed_heun(state.u, model, grid, spec, deform, f, dt)
    Pp = _Probe(up, model, grid, spec, deform, f)
    if scheme == "central":
        um = _fixed_heun(state.u, model, grid, spec, deform, f, -dt)
        Pm = _Probe(um, model, grid, spec, deform, f)
        lo, span = Pm, 2 * dt
    else:
        Pm = None
        lo, span = None, dt

    def ddt(get):
        base = get(lo) if lo is not None else get(None)
        return (get(Pp) - base) / span

    def pick(attr):
        return lambda P: getattr(geo0 if P is None else P.geo, attr)

    dX = gridmod.gradient(grid, X)                   # [n, k, i] = d_i X^k
    res = {}
    if "metric" in wanted:
        g = geo0.g
        lhs = ddt(pick("g")) + _lie_scalar(grid, g, X)
        lhs += np.einsum("nkj,nki->nij", g, dX) + np.einsum("nik,nkj->nij", g, dX)
        res["metric"] = float(np.abs(lhs - rhs["metric"]).max())
    if "normal" in wanted:
        curv_gamma = geo0.amb.gamma
        pdot = -sig * rhs["w"][:, None] * geo0.nu
        lhs = ddt(pick("nu")) + _lie_scalar(grid, geo0.nu, X)
        lhs += np.einsum("nabc,nb,nc->na", curv_gamma, pdot, geo0.nu)
        res["normal"] = float(np.abs(lhs - rhs["normal"]).max())
    if "shape" in wanted:
        M = geo0.shape_op
        lhs = ddt(pick("shape_op")) + _lie_scalar(grid, M, X)
        lhs -= np.einsum("nkb,nak->nab", M, dX)
        lhs += np.einsum("nak,nkb->nab", M, dX)
        res["shape"] = float(np.abs(lhs - rhs["shape"]).max())
    if "vtilde" in wanted:
        vt = geo0.vtilde
        dvt = gridmod.gradient(grid, vt)
        hess = geo0.covariant_hessian(vt, dvt, gridmod.hessian(grid, vt))
        lhs = ddt(pick("vtilde")) + np.einsum("nk,nk->n", dvt, X)
        lhs -= np.einsum("nij,nij->n", rhs["A"], hess)
        res["vtilde"] = float(np.abs(lhs - rhs["vtilde"]).max())
    if "speed" in wanted:
        w = rhs["w"]
        dw = gridmod.gradient(grid, w)
        hess = geo0.covariant_hessian(w, dw, gridmod.hessian(grid, w))
        wget = (lambda P: rhs["w"] if P is None else P.ev.w)
        lhs = ddt(wget) + np.einsum("nk,nk->n", dw, X)
        lhs -= np.einsum("nij,nij->n", rhs["A"], hess)
        res["speed"] = float(np.abs(lhs - rhs["speed"]).max())
    return res


# --- coordinate slices -------------------------------------------------------------

@dataclass(frozen=True)
class SliceDecayReport:
    taus: np.ndarray
    phi: np.ndarray
    identity_residual: float
    phi_integral: float
    divergent: bool | None
    closed_form_error: float | None
    rescaled_time: np.ndarray | None
    rescaled_min_ratio: float | None


def _slice_data(model, taus, base):
    N = len(base)
    n = base.shape[1]
    u = np.repeat(taus, N)
    pts = np.tile(base, (len(taus), 1))
    geo = geometry_from_jets(model, pts, u, np.zeros((len(u), n)), np.zeros((len(u), n, n)))
    eH = (np.exp(geo.amb.psi) * geo.H).reshape(len(taus), N)
    logdet = np.log(np.linalg.det(geo.g)).reshape(len(taus), N)
    return eH, logdet


def slice_decay_check(model: AmbientModel, x0_interval, n_tau_samples: int = 20,
                      base_points=None, n_base: int = 16, seed: int = 20240601,
                      quad_nodes: int = 16) -> SliceDecayReport:
    """Check the log-volume identity of the coordinate slices x0 = tau.

    log det g(tau0, x) - log det g(tau, x) must equal the integral of
    2 e^psi H(s, x) from tau0 to tau; the integral uses Gauss-Legendre on each
    sub-interval between consecutive samples.
    """
    if model.signature != LORENTZIAN:
        raise WrongSignature("slice decay is defined for Lorentzian models")
    lo, hi = (float(x) for x in x0_interval)
    if not lo < hi:
        raise ValueError("empty x0 interval")
    if n_tau_samples < 2:
        raise ValueError("need at least two tau samples")
    if base_points is None:
        base_points = model.sample_base(np.random.default_rng(seed), n_base)
    base = np.atleast_2d(np.asarray(base_points, dtype=float))
    taus = np.linspace(lo, hi, n_tau_samples)
    eH, logdet = _slice_data(model, taus, base)
    if np.any(eH <= 0):
        raise NonPositiveSliceH(f"slice mean curvature <= 0 in [{lo}, {hi}]")
    phi = eH.min(axis=1)
    xg, wg = np.polynomial.legendre.leggauss(quad_nodes)
    integral = np.zeros((len(taus), len(base)))
    for k in range(1, len(taus)):
        a, b = taus[k - 1], taus[k]
        nodes = 0.5 * (b - a) * xg + 0.5 * (a + b)
        vals, _ = _slice_data(model, nodes, base)
        integral[k] = integral[k - 1] + 0.5 * (b - a) * (wg[:, None] * 2 * vals).sum(axis=0)
    resid = float(np.abs((logdet[0] - logdet) - integral).max())
    # phi integral over the whole interval from the per-slice minimum, by the
    # closed form when available
    closed = model.slice_decay_closed_form
    closed_err = None
    rescaled = None
    ratio = None
    if closed is not None:
        closed_err = float(np.abs(closed(taus) - phi).max())
        Phi_int = []
        acc = 0.0
        Phi_int.append(acc)
        for k in range(1, len(taus)):
            a, b = taus[k - 1], taus[k]
            nodes = 0.5 * (b - a) * xg + 0.5 * (a + b)
            acc += 0.5 * (b - a) * float(np.dot(wg, closed(nodes)))
            Phi_int.append(acc)
        rescaled = np.array(Phi_int)
        ratio = float((eH / closed(taus)[:, None]).min())
        phi_integral = rescaled[-1]
    else:
        phi_integral = float(np.sum(0.5 * (phi[1:] + phi[:-1]) * np.diff(taus)))
    return SliceDecayReport(taus, phi, resid, float(phi_integral), model.decay_divergent,
                            closed_err, rescaled, ratio)
