"""Extrinsic geometry of graphs x0 = u(x) over the base manifold.

Conventions:

* v^2 = 1 + sigma |Du|^2 with |Du|^2 = sigma^ij u_i u_j, so v = sqrt(1 - |Du|^2)
  for Lorentzian ambients and v = sqrt(1 + |Du|^2) for Riemannian ones.
* The normal is nu = sigma e^{-psi} v^{-1} (1, -sigma u^i): past directed in the
  Lorentzian case, outward (nu^0 > 0) in the Riemannian case.
* h_ij = -<d_i d_j x + Gamma(x_i, x_j), nu>, i.e. the Gauss formula
  x_ij = -sigma h_ij nu.  Round spheres in polar coordinates get kappa = 1/r
  and collapsing FLRW slices get positive mean curvature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from .ambient import LORENTZIAN, AmbientFields, AmbientModel, ambient_fields
from .errors import DegenerateMetric, NotSpacelike, OutOfRange, WrongSignature

CONES = ("all", "gamma_plus", "gamma_2")
CONE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GraphState:
    u: np.ndarray
    model: AmbientModel
    grid: gridmod.BaseGrid
    t: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.shape != (self.grid.size,):
            raise ValueError(f"u has shape {u.shape}, grid needs ({self.grid.size},)")
        if not np.all(np.isfinite(u)):
            raise OutOfRange("u has non-finite entries")
        self.model.check_range(u)
        object.__setattr__(self, "u", u)

    def with_u(self, u, t=None) -> "GraphState":
        return GraphState(u, self.model, self.grid, self.t if t is None else t)


def principal_curvatures(g, h) -> np.ndarray:
    """Eigenvalues of g^{-1} h, ascending, for stacks (N, n, n) or single matrices."""
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    single = g.ndim == 2
    if single:
        g, h = g[None], h[None]
    n = g.shape[-1]
    if n == 1:
        if np.any(g[:, 0, 0] <= 0):
            raise DegenerateMetric("non-positive metric")
        k = h[:, 0, :] / g[:, 0, :]
    elif n == 2:
        if np.any(g[:, 0, 0] <= 0):
            raise DegenerateMetric("non-positive metric")
        # closed-form Cholesky, then the symmetric 2x2 eigenproblem; writing
        # the discriminant as a sum of squares avoids cancellation at umbilics
        l00 = np.sqrt(g[:, 0, 0])
        l10 = 0.5 * (g[:, 0, 1] + g[:, 1, 0]) / l00
        rest = g[:, 1, 1] - l10 * l10
        if np.any(rest <= 0):
            raise DegenerateMetric("non-positive metric")
        l11 = np.sqrt(rest)
        h01 = 0.5 * (h[:, 0, 1] + h[:, 1, 0])
        c00 = h[:, 0, 0] / (l00 * l00)
        c01 = (h01 - l10 * c00 * l00) / (l00 * l11)
        c11 = (h[:, 1, 1] - 2 * l10 * h01 / l00 + l10 * l10 * c00) / (l11 * l11)
        mean = 0.5 * (c00 + c11)
        disc = np.hypot(0.5 * (c00 - c11), c01)
        k = np.stack([mean - disc, mean + disc], axis=1)
    else:
        try:
            L = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateMetric(str(exc)) from exc
        Li = np.linalg.inv(L)
        k = np.linalg.eigvalsh(Li @ h @ np.swapaxes(Li, 1, 2))
    return k[0] if single else k


def admissible(kappa, cone: str):
    """Cone membership with strict inequality (tolerance 1e-12)."""
    if cone not in CONES:
        raise ValueError(f"unknown cone {cone!r}")
    k = np.asarray(kappa, dtype=float)
    if cone == "all":
        res = np.ones(k.shape[:-1], dtype=bool)
    elif cone == "gamma_plus":
        res = k.min(axis=-1) > CONE_TOL
    else:
        H = k.sum(axis=-1)
        H2 = 0.5 * (H * H - (k * k).sum(axis=-1))
        res = (H > CONE_TOL) & (H2 > CONE_TOL)
    return bool(res) if np.ndim(res) == 0 else res


def cone_margin(kappa, cone: str) -> float:
    """Distance-to-boundary proxy: min kappa on gamma_plus, min(H, H2) on gamma_2."""
    k = np.atleast_2d(np.asarray(kappa, dtype=float))
    if cone == "all":
        return float("inf")
    if cone == "gamma_plus":
        return float(k.min())
    H = k.sum(axis=-1)
    H2 = 0.5 * (H * H - (k * k).sum(axis=-1))
    return float(min(H.min(), H2.min()))


@dataclass(eq=False)
class GraphGeometry:
    """Pointwise geometry of a graph; arrays carry the node index first."""

    model: AmbientModel
    grid: gridmod.BaseGrid | None
    points: np.ndarray
    u: np.ndarray
    du: np.ndarray
    ddu: np.ndarray
    amb: AmbientFields
    grad2: np.ndarray
    v: np.ndarray
    nu: np.ndarray
    nu_low: np.ndarray
    tangents: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    sqrt_g: np.ndarray
    h: np.ndarray
    shape_op: np.ndarray
    kappa: np.ndarray
    H: np.ndarray
    A2: np.ndarray
    area_density: np.ndarray
    _curv: AmbientFields | None = field(default=None, repr=False)
    _christ: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma(self) -> int:
        return self.model.signature

    @property
    def vtilde(self) -> np.ndarray:
        return 1.0 / self.v

    @property
    def n(self) -> int:
        return self.g.shape[-1]

    def admissible(self, cone: str):
        return admissible(self.kappa, cone)

    def curvature_fields(self) -> AmbientFields:
        """Ambient fields including Christoffel derivatives and Riemann tensor."""
        if self._curv is None:
            self._curv = ambient_fields(self.model, self.points, second=True)
        return self._curv

    def christoffel(self) -> np.ndarray:
        """Induced Christoffels Gamma^k_ij from grid derivatives of g, shape (N, k, i, j)."""
        if self._christ is None:
            self._christ = induced_christoffels(self.grid, self.g, self.ginv)
        return self._christ

    def covariant_hessian(self, f, df=None, ddf=None) -> np.ndarray:
        """f_{;ij} = d_ij f - Gamma^k_ij d_k f."""
        if df is None:
            df = gridmod.gradient(self.grid, f)
        if ddf is None:
            ddf = gridmod.hessian(self.grid, f)
        return ddf - np.einsum("nkij,nk->nij", self.christoffel(), df)

    def normal_riemann(self) -> np.ndarray:
        """R(nu, x_i, nu, x_j), shape (N, n, n)."""
        R = self.curvature_fields().riemann
        return np.einsum("nabcd,na,nib,nc,njd->nij", R, self.nu, self.tangents, self.nu,
                         self.tangents)

    def ricci_normal(self) -> np.ndarray:
        return np.einsum("na,nab,nb->n", self.nu, self.curvature_fields().ricci, self.nu)


def induced_christoffels(grid, g, ginv) -> np.ndarray:
    dg = gridmod.gradient(grid, g)  # [n, i, j, k] = d_k g_ij
    low = 0.5 * (np.einsum("nlji->nlij", dg) + dg - np.einsum("nijl->nlij", dg))
    return np.einsum("nkl,nlij->nkij", ginv, low)


def geometry_from_jets(model: AmbientModel, base_points, u, du, ddu, grid=None) -> GraphGeometry:
    """Geometry from u and its first and second partials at arbitrary base points."""
    base_points = np.atleast_2d(np.asarray(base_points, dtype=float))
    u = np.asarray(u, dtype=float)
    du = np.asarray(du, dtype=float)
    ddu = np.asarray(ddu, dtype=float)
    N, n = base_points.shape
    X = np.column_stack([u, base_points])
    amb = ambient_fields(model, X)
    sig = model.signature
    gbar = amb.G[:, 1:, 1:]
    e2psi = np.exp(2 * amb.psi)
    s_inv = np.linalg.inv(gbar) * e2psi[:, None, None]
    u_up = np.einsum("nij,nj->ni", s_inv, du)
    grad2 = np.einsum("ni,ni->n", du, u_up)
    v2 = 1.0 + sig * grad2
    if np.any(v2 <= 0):
        raise NotSpacelike(f"|Du| >= 1 at {int(np.sum(v2 <= 0))} nodes")
    v = np.sqrt(v2)
    nu = np.empty((N, n + 1))
    pref = sig * np.exp(-amb.psi) / v
    nu[:, 0] = pref
    nu[:, 1:] = -sig * pref[:, None] * u_up
    nu_low = np.einsum("nab,nb->na", amb.G, nu)
    T = np.zeros((N, n, n + 1))
    T[:, :, 0] = du
    T[:, :, 1:] = np.eye(n)
    g = T @ amb.G @ np.swapaxes(T, 1, 2)
    g = 0.5 * (g + np.swapaxes(g, 1, 2))
    det = np.linalg.det(g)
    if np.any(det <= 0):
        raise DegenerateMetric("induced metric degenerate")
    ginv = np.linalg.inv(g)
    D = n + 1
    # Gamma^a_bc x_i^b x_j^c as two batched products
    gT = (amb.gamma.reshape(N, D * D, D) @ np.swapaxes(T, 1, 2)).reshape(N, D, D, n)
    gTT = np.swapaxes(gT, 2, 3).reshape(N, D * n, D) @ np.swapaxes(T, 1, 2)
    second = np.ascontiguousarray(gTT.reshape(N, D, n, n).transpose(0, 3, 2, 1))
    second[..., 0] += ddu
    h = -np.einsum("nija,na->nij", second, nu_low)
    h = 0.5 * (h + np.swapaxes(h, 1, 2))
    shape_op = np.einsum("nik,nkj->nij", ginv, h)
    kappa = principal_curvatures(g, h)
    H = np.einsum("nii->n", shape_op)
    A2 = np.einsum("nij,nji->n", shape_op, shape_op)
    area = v * np.sqrt(np.linalg.det(gbar))
    return GraphGeometry(model, grid, X, u, du, ddu, amb, grad2, v, nu, nu_low, T, g, ginv,
                         np.sqrt(det), h, shape_op, kappa, H, A2, area)


def graph_geometry(model: AmbientModel, grid, u) -> GraphGeometry:
    u = np.asarray(u, dtype=float)
    model.check_range(u)
    return geometry_from_jets(model, grid.points(), u, gridmod.gradient(grid, u),
                              gridmod.hessian(grid, u), grid)


def geometry_of(state: GraphState) -> GraphGeometry:
    return graph_geometry(state.model, state.grid, state.u)


def lorentz_graph_h_crosscheck(model: AmbientModel, grid, u) -> float:
    """Max relative deviation between h_ij and its graph-Hessian representation.

    The alternative form is e^{-psi} v^{-1} h_ij = -u_;ij - Gamma^0_00 u_i u_j
    - Gamma^0_i0 u_j - Gamma^0_j0 u_i - Gamma^0_ij with covariant derivatives of
    the induced metric.
    """
    if model.signature != LORENTZIAN:
        raise WrongSignature("cross-check applies to Lorentzian graphs")
    geo = graph_geometry(model, grid, u)
    G0 = geo.amb.gamma[:, 0]
    du = geo.du
    rhs = -geo.covariant_hessian(u, du, geo.ddu)
    rhs -= G0[:, 0, 0][:, None, None] * du[:, :, None] * du[:, None, :]
    mix = G0[:, 1:, 0]
    rhs -= mix[:, :, None] * du[:, None, :] + du[:, :, None] * mix[:, None, :]
    rhs -= G0[:, 1:, 1:]
    alt = (np.exp(geo.amb.psi) * geo.v)[:, None, None] * rhs
    diff = np.abs(alt - geo.h).max()
    if diff == 0.0:
        return 0.0
    scale = max(np.abs(geo.h).max(), np.finfo(float).tiny)
    return float(diff / scale)
