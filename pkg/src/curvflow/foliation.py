"""Linearized prescribed-curvature operator, Newton refinement and CMC foliations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.sparse.linalg import LinearOperator, cg, gmres

from . import grid as gridmod
from .ambient import LORENTZIAN, AmbientModel
from .curvfunc import CurvatureSpec, DeformSpec, F_eval, fij_field
from .errors import (CurvflowError, IndefiniteCoefficient, LinearSolveFail, NewtonStall,
                     NonMonotone, NonPositiveArgument, NotSpacelike, OutOfRange, OutsideCone,
                     UnsupportedModel, WrongSignature)
from .flow import FlowConfig, PrescribedCurvature, run
from .geometry import GraphGeometry, GraphState, geometry_of

KRYLOV_RTOL = 1e-10
KRYLOV_MAXITER = 500
NEWTON_ENTRY = 1e-3


@dataclass(eq=False)
class LinearizedOperator:
    """L phi = -F^{ij} phi_;ij + c0 phi.

    c0 = -sigma (F^{ij} h_i^k h_kj + F^{ij} R(nu, x_i, nu, x_j) + f_a nu^a).
    A normal displacement with graph change e^{-psi} v phi changes F - f by
    L phi to first order.  For F = H the second-order part is the
    divergence-form Laplace-Beltrami operator, which is self-adjoint for the
    measure sqrt(g) dx.
    """

    geometry: GraphGeometry
    spec: CurvatureSpec
    Fij: np.ndarray
    zero_order: np.ndarray
    divergence_form: bool

    @property
    def grid(self):
        return self.geometry.grid

    def apply(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        geo = self.geometry
        if self.divergence_form:
            second = -gridmod.laplace_beltrami(geo.grid, phi, geo.g, geo.sqrt_g)
        else:
            second = -np.einsum("nij,nij->n", self.Fij, geo.covariant_hessian(phi))
        return second + self.zero_order * phi

    def measure(self) -> np.ndarray:
        """Weights of the discrete inner product <a, b> = sum a b sqrt(g) dx."""
        return self.geometry.sqrt_g * np.prod(self.grid.h)

    def inner(self, a, b) -> float:
        return float(np.sum(np.asarray(a) * np.asarray(b) * self.measure()))

    def normal_to_height(self) -> np.ndarray:
        """Factor turning the normal variation phi into the height change."""
        geo = self.geometry
        return np.exp(-geo.amb.psi) * geo.v


def linearize(geo: GraphGeometry, spec: CurvatureSpec,
              f: PrescribedCurvature | None) -> LinearizedOperator:
    kappa = geo.kappa
    F_eval(spec, kappa)  # raises OutsideCone when inadmissible
    Fij = fij_field(spec, geo.g, geo.h)
    hh = np.einsum("nik,nkj->nij", geo.h, geo.shape_op)
    curv = np.einsum("nij,nij->n", Fij, hh) + np.einsum("nij,nij->n", Fij, geo.normal_riemann())
    if f is not None:
        curv = curv + np.einsum("na,na->n", f.jet(geo.points)[1], geo.nu)
    return LinearizedOperator(geo, spec, Fij, -geo.sigma * curv, spec.kind == "H")


def _solve(op: LinearOperator, b, method: str, rtol: float, maxiter: int):
    if method == "cg":
        x, info = cg(op, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    else:
        x, info = gmres(op, b, rtol=rtol, atol=0.0, restart=min(op.shape[0], 100),
                        maxiter=maxiter)
    if info != 0:
        raise LinearSolveFail(f"{method} did not reach rtol={rtol:g} (info={info})")
    return x


def _residual(state: GraphState, spec: CurvatureSpec, f: PrescribedCurvature | None):
    geo = geometry_of(state)
    F = F_eval(spec, geo.kappa)[0]
    fv = np.zeros_like(F) if f is None else f.values(geo)
    return geo, F - fv


@dataclass(frozen=True, eq=False)
class NewtonResult:
    state: GraphState
    residual: float
    iterations: int
    history: tuple

    @property
    def u(self) -> np.ndarray:
        return self.state.u


def newton_polish(state: GraphState, spec: CurvatureSpec, deform: DeformSpec,
                  f: PrescribedCurvature | None, tol: float = 1e-12,
                  max_iter: int = 10) -> NewtonResult:
    """Damped Newton on F(u) = f with the linearized operator as Jacobian.

    ``deform`` does not change the root; it is accepted so callers can pass the
    same triple they flowed with.  Steps are tried at full, half and quarter
    length; if none lowers sup|F - f| the iteration stalls.
    """
    del deform
    geo, r = _residual(state, spec, f)
    res = float(np.abs(r).max())
    if res >= NEWTON_ENTRY:
        raise ValueError(f"sup|F - f| = {res:.3g}; Newton needs a start below {NEWTON_ENTRY:g}")
    history = [res]
    it = 0
    while res >= tol:
        if it >= max_iter:
            raise NewtonStall(f"sup|F - f| = {res:.3g} after {it} iterations")
        L = linearize(geo, spec, f)
        N = state.grid.size
        A = LinearOperator((N, N), matvec=L.apply, dtype=float)
        phi = _solve(A, -r, "gmres", KRYLOV_RTOL, KRYLOV_MAXITER)
        du = L.normal_to_height() * phi
        for damp in (1.0, 0.5, 0.25):
            try:
                trial = state.with_u(state.u + damp * du)
                tgeo, tr = _residual(trial, spec, f)
            except (OutsideCone, NonPositiveArgument, OutOfRange, NotSpacelike):
                continue
            tres = float(np.abs(tr).max())
            if tres < res:
                break
        else:
            raise NewtonStall(f"no damped step lowers sup|F - f| = {res:.3g}")
        state, geo, r, res = trial, tgeo, tr, tres
        history.append(res)
        it += 1
    return NewtonResult(state, res, it, tuple(history))


@dataclass(frozen=True)
class UdotResult:
    min_udot: float
    udot: np.ndarray
    residual: float


def udot_positivity(geo: GraphGeometry) -> UdotResult:
    """Solve -Delta w + (|A|^2 + Ric(nu, nu)) w = 1 and report min w.

    The system is multiplied by sqrt(g) so the discrete operator is
    symmetric, then solved by conjugate gradients.
    """
    if geo.sigma != LORENTZIAN:
        raise WrongSignature("the lapse equation is posed in Lorentzian models")
    c = geo.A2 + geo.ricci_normal()
    if np.any(c <= 0):
        raise IndefiniteCoefficient(f"|A|^2 + Ric(nu, nu) has minimum {c.min():.3g} <= 0")
    grid = geo.grid
    Amat = geo.sqrt_g[:, None, None] * geo.ginv
    N = grid.size

    def apply(w):
        return -gridmod.div_form(grid, w, Amat) + geo.sqrt_g * c * w

    op = LinearOperator((N, N), matvec=apply, dtype=float)
    w = _solve(op, geo.sqrt_g.copy(), "cg", 1e-13, 5 * N)
    lap = gridmod.laplace_beltrami(grid, w, geo.g, geo.sqrt_g)
    resid = float(np.abs(-lap + c * w - 1.0).max())
    return UdotResult(float(w.min()), w, resid)


@dataclass(eq=False)
class Leaf:
    tau: float
    u: np.ndarray
    residual: float
    min_udot: float
    newton_iterations: int
    flow_steps: int


@dataclass(eq=False)
class FoliationResult:
    model_id: str
    taus: np.ndarray
    leaves: list
    ordering_ok: bool
    positivity_ok: bool
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.ordering_ok and self.positivity_ok

    def leaf_table(self):
        return [(lf.tau, float(lf.u.min()), float(lf.u.max()), lf.residual, lf.min_udot)
                for lf in self.leaves]


def tau_gate(model: AmbientModel, taus) -> None:
    taus = [float(t) for t in taus]
    if any(t == 0.0 for t in taus):
        raise UnsupportedModel("tau=0 requested: unsupported")
    Lam = model.cosmological_constant
    if Lam is not None and Lam > 0:
        bound = math.sqrt(model.base_dim * Lam)
        low = [t for t in taus if t <= bound]
        if low:
            raise ValueError(f"tau values {low} do not exceed sqrt(n Lambda) = {bound:.6g}")
    if any(t < 0 for t in taus):
        raise ValueError("mean curvature values must be positive")


def cmc_sweep(state_top: GraphState, taus, config: FlowConfig = FlowConfig(tol_stationary=1e-7),
              newton_tol: float = 1e-12) -> FoliationResult:
    """Constant mean curvature leaves for ascending ``taus``.

    Leaves are computed from the largest tau down, each flow starting at the
    previous leaf (the first at ``state_top``, an upper barrier for max tau),
    then polished by Newton.  Ordering and lapse positivity are certified
    after the sweep; failing certificates mark the result, not the run.
    """
    model = state_top.model
    if model.signature != LORENTZIAN:
        raise WrongSignature("CMC foliations are built in Lorentzian models")
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or taus.size == 0:
        raise ValueError("need a non-empty list of tau values")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("tau values must be strictly ascending")
    tau_gate(model, taus)
    spec = CurvatureSpec("H", model.base_dim)
    deform = DeformSpec()
    leaves = {}
    start = state_top
    for tau in taus[::-1]:
        f = PrescribedCurvature.constant(tau)
        try:
            st, trace, verdict = run(start.with_u(start.u, 0.0), spec, deform, f, config)
            if verdict != "converged":
                raise NewtonStall(f"flow ended with verdict {verdict}")
            pol = newton_polish(st, spec, deform, f, tol=newton_tol)
        except CurvflowError as exc:
            exc.args = (f"tau={tau:g}: {exc}",) + exc.args[1:]
            exc.tau = float(tau)
            raise
        geo = geometry_of(pol.state)
        failures = []
        try:
            ud = udot_positivity(geo).min_udot
        except (IndefiniteCoefficient, LinearSolveFail) as exc:
            ud = math.nan
            failures.append(f"tau={tau:g}: {exc}")
        leaves[float(tau)] = (Leaf(float(tau), pol.u.copy(), pol.residual, ud, pol.iterations,
                                   trace.monitors["steps"]), failures)
        start = pol.state
    ordered = [leaves[float(t)][0] for t in taus]
    failures = [msg for t in taus for msg in leaves[float(t)][1]]
    ordering_ok = True
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            if not np.all(ordered[i].u < ordered[j].u):
                ordering_ok = False
                failures.append(f"leaves tau={ordered[i].tau:g} and tau={ordered[j].tau:g} "
                                "are not strictly ordered")
    positivity_ok = all(lf.min_udot > 0 for lf in ordered)
    if not positivity_ok and not any("udot" in m for m in failures):
        failures.append("lapse not positive on every leaf")
    return FoliationResult(model.model_id, taus, ordered, ordering_ok, positivity_ok, failures)


@dataclass(eq=False)
class TimeFunction:
    """Per-node inverse x0 -> tau of the leaf heights."""

    taus: np.ndarray
    heights: np.ndarray          # (n_leaves, N)
    monotone: bool
    min_slope: float

    def __call__(self, x0, node: int):
        P = PchipInterpolator(self.heights[:, node], self.taus)
        return P(x0)

    def at_leaves(self) -> np.ndarray:
        """Interpolated tau at every tabulated height, shape (n_leaves, N)."""
        out = np.empty_like(self.heights)
        for k in range(self.heights.shape[1]):
            out[:, k] = PchipInterpolator(self.heights[:, k], self.taus)(self.heights[:, k])
        return out


def time_function(result: FoliationResult) -> TimeFunction:
    """Tabulate tau -> u(tau, x) per node and build the monotone cubic inverse."""
    taus = np.asarray(result.taus, dtype=float)
    U = np.array([lf.u for lf in result.leaves])
    if len(taus) == 1:
        return TimeFunction(taus, U, True, math.inf)
    slope = np.diff(U, axis=0) / np.diff(taus)[:, None]
    if np.any(slope <= 0):
        raise NonMonotone(f"leaf heights decrease in tau (min slope {slope.min():.3g})")
    return TimeFunction(taus, U, True, float(slope.min()))
