"""Warped-product model manifolds with analytic tensor closures.

Every catalog model has the form

    ds^2 = e^{2 psi} (sigma dt^2 + sigma_ij dx^i dx^j),   sigma_ij = a(t)^2 gamma_ij(x)

where ``sigma`` is the signature sign (-1 Lorentzian, +1 Riemannian), ``a`` is a
scale factor with hand-derived first and second derivatives and ``gamma`` is
either the flat metric on a torus or the round metric on S^2 in polar
coordinates (theta, phi).

Only the metric closures are model specific.  Christoffel symbols, their
derivatives and the Riemann tensor follow from the closed-form first and second
partials of the metric by the usual formulas, so no numerical differentiation
is involved anywhere.

Sign convention for the curvature tensor: R_abcd = K (g_ac g_bd - g_ad g_bc) in
a space of constant sectional curvature K, and Ric_bd = g^ac R_abcd.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NotASpaceForm, OutOfRange, WrongSignature

LORENTZIAN = -1
RIEMANNIAN = 1
DEFAULT_SEED = 20240601
MODEL_IDS = ("lorentz-product", "flrw-collapse", "de-sitter", "euclidean-polar", "hyperbolic-polar")


# --- scale factors: a(t) -> (a, a', a'') -----------------------------------------

def _unit_scale(t):
    return np.ones_like(t), np.zeros_like(t), np.zeros_like(t)


def _collapse_scale(T):
    # a = T - t, linear so a'' = 0
    def scale(t):
        return T - t, -np.ones_like(t), np.zeros_like(t)

    return scale


def _cosh_scale(t):
    return np.cosh(t), np.sinh(t), np.cosh(t)


def _linear_scale(t):
    return t.copy(), np.ones_like(t), np.zeros_like(t)


def _sinh_scale(t):
    return np.sinh(t), np.cosh(t), np.sinh(t)


# --- base metrics gamma(x) -> (gamma, d gamma, d2 gamma) over base coordinates ---

def _flat_base(x):
    N, n = x.shape
    g = np.broadcast_to(np.eye(n), (N, n, n)).copy()
    return g, np.zeros((N, n, n, n)), np.zeros((N, n, n, n, n))


def _round_base(x):
    # gamma = diag(1, sin^2 theta); d/dtheta sin^2 = sin 2theta, second = 2 cos 2theta
    N = x.shape[0]
    th = x[:, 0]
    g = np.zeros((N, 2, 2))
    g[:, 0, 0] = 1.0
    g[:, 1, 1] = np.sin(th) ** 2
    dg = np.zeros((N, 2, 2, 2))
    dg[:, 1, 1, 0] = np.sin(2 * th)
    d2g = np.zeros((N, 2, 2, 2, 2))
    d2g[:, 1, 1, 0, 0] = 2 * np.cos(2 * th)
    return g, dg, d2g


def _zero_psi(X):
    N, D = X.shape
    return np.zeros(N), np.zeros((N, D)), np.zeros((N, D, D))


@dataclass(frozen=True, eq=False)
class AmbientModel:
    """Analytic warped-product model.

    ``psi_fn`` maps points X of shape (N, n+1) to (psi, d psi, d2 psi); the
    scale factor and base metric together define ``sigma_metric``.
    """

    model_id: str
    signature: int
    base_dim: int
    base: str
    range: tuple[float, float]
    spaceform_K: float | None
    cosmological_constant: float | None
    params: dict = field(default_factory=dict)
    scale_fn: Callable = _unit_scale
    psi_fn: Callable = _zero_psi
    slice_decay_closed_form: Callable | None = None
    decay_divergent: bool | None = None

    @property
    def dim(self) -> int:
        return self.base_dim + 1

    def check_range(self, x0) -> None:
        x0 = np.asarray(x0, dtype=float)
        lo, hi = self.range
        if not np.all(np.isfinite(x0)) or np.any(x0 <= lo) or np.any(x0 >= hi):
            raise OutOfRange(f"x0 outside ({lo}, {hi}) for {self.model_id}")

    def psi(self, X):
        return self.psi_fn(np.asarray(X, dtype=float))

    def sigma_metric(self, X):
        """Return sigma_ij, its partials d_c sigma_ij and d_c d_d sigma_ij at X (N, n+1)."""
        X = np.asarray(X, dtype=float)
        n = self.base_dim
        a, da, dda = self.scale_fn(X[:, 0])
        gam, dgam, ddgam = (_round_base if self.base == "round" else _flat_base)(X[:, 1:])
        N = X.shape[0]
        a2 = (a * a)[:, None, None]
        s = a2 * gam
        ds = np.zeros((N, n, n, n + 1))
        ds[..., 0] = (2 * a * da)[:, None, None] * gam
        ds[..., 1:] = a2[..., None] * dgam
        dds = np.zeros((N, n, n, n + 1, n + 1))
        dds[..., 0, 0] = (2 * (da * da + a * dda))[:, None, None] * gam
        mixed = (2 * a * da)[:, None, None, None] * dgam
        dds[..., 0, 1:] = mixed
        dds[..., 1:, 0] = mixed
        dds[..., 1:, 1:] = a2[..., None, None] * ddgam
        return s, ds, dds

    def sample_base(self, rng, count):
        if self.base == "round":
            th = rng.uniform(0.05, np.pi - 0.05, count)
            ph = rng.uniform(0.0, 2 * np.pi, count)
            return np.stack([th, ph], axis=1)
        return rng.uniform(0.0, 2 * np.pi, (count, self.base_dim))

    def default_interval(self) -> tuple[float, float]:
        lo, hi = self.range
        if np.isfinite(hi):
            return (hi - 3.0, hi - 0.2)
        if lo == 0.0:
            return (0.3, 3.0)
        return (-2.0, 2.0)

    def sample_points(self, rng, count, x0_interval=None):
        lo, hi = x0_interval if x0_interval is not None else self.default_interval()
        t = rng.uniform(lo, hi, count)
        return np.column_stack([t, self.sample_base(rng, count)])


def make_model(model_id: str, n: int = 1, base: str = "flat", **params) -> AmbientModel:
    """Build a catalog model.

    ``base`` is "flat" (circle or torus) or "round" (S^2, needs n = 2).  The
    polar models and de Sitter are only space forms over a base of constant
    curvature matching their scale factor, so they demand the round base when
    n = 2.
    """
    if base not in ("flat", "round"):
        raise ValueError(f"unknown base {base!r}")
    if base == "round" and n != 2:
        raise ValueError("round base requires n = 2")
    needs_round = n == 2 and model_id in ("de-sitter", "euclidean-polar", "hyperbolic-polar")
    if needs_round and base != "round":
        raise ValueError(f"{model_id} with n = 2 requires the round sphere base")
    inf = np.inf
    if model_id == "lorentz-product":
        return AmbientModel(model_id, LORENTZIAN, n, base, (-inf, inf),
                            0.0 if base == "flat" else None, 0.0, {})
    if model_id == "flrw-collapse":
        T = float(params.get("T", 2.0))
        if not T > 0:
            raise ValueError("flrw-collapse requires T > 0")
        # slice mean curvature e^psi H = n / (T - t); its integral diverges at T
        return AmbientModel(model_id, LORENTZIAN, n, base, (-inf, T), None, 0.0, {"T": T},
                            scale_fn=_collapse_scale(T),
                            slice_decay_closed_form=lambda t: n / (T - np.asarray(t)),
                            decay_divergent=True)
    if model_id == "de-sitter":
        return AmbientModel(model_id, LORENTZIAN, n, base, (-inf, inf), 1.0, float(n), {},
                            scale_fn=_cosh_scale,
                            slice_decay_closed_form=lambda t: -n * np.tanh(np.asarray(t)),
                            decay_divergent=None)
    if model_id == "euclidean-polar":
        return AmbientModel(model_id, RIEMANNIAN, n, base, (0.0, inf), 0.0, None, {},
                            scale_fn=_linear_scale)
    if model_id == "hyperbolic-polar":
        return AmbientModel(model_id, RIEMANNIAN, n, base, (0.0, inf), -1.0, None, {},
                            scale_fn=_sinh_scale)
    raise ValueError(f"unknown model_id {model_id!r}")


@dataclass
class AmbientFields:
    """Vectorized ambient tensors at N points; index 0 is the time coordinate."""

    psi: np.ndarray
    dpsi: np.ndarray
    d2psi: np.ndarray
    G: np.ndarray
    Ginv: np.ndarray
    dG: np.ndarray          # [n, a, b, c] = d_c g_ab
    gamma: np.ndarray       # [n, a, b, c] = Gamma^a_bc
    d2G: np.ndarray | None = None
    dgamma: np.ndarray | None = None   # [n, a, b, c, e] = d_e Gamma^a_bc
    riemann: np.ndarray | None = None
    ricci: np.ndarray | None = None


def ambient_fields(model: AmbientModel, X, second: bool = False) -> AmbientFields:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    model.check_range(X[:, 0])
    N, D = X.shape
    n = D - 1
    psi, dpsi, d2psi = model.psi(X)
    s, ds, dds = model.sigma_metric(X)
    S = np.zeros((N, D, D))
    S[:, 0, 0] = model.signature
    S[:, 1:, 1:] = s
    dS = np.zeros((N, D, D, D))
    dS[:, 1:, 1:, :] = ds
    E = np.exp(2 * psi)
    dE = 2 * E[:, None] * dpsi
    G = E[:, None, None] * S
    dG = dE[:, None, None, :] * S[..., None] + E[:, None, None, None] * dS
    Ginv = np.linalg.inv(G)
    low = 0.5 * (np.einsum("ndcb->ndbc", dG) + dG - np.einsum("nbcd->ndbc", dG))
    gamma = (Ginv @ low.reshape(N, D, D * D)).reshape(N, D, D, D)
    out = AmbientFields(psi, dpsi, d2psi, G, Ginv, dG, gamma)
    if not second:
        return out
    d2S = np.zeros((N, D, D, D, D))
    d2S[:, 1:, 1:, :, :] = dds
    d2E = E[:, None, None] * (4 * dpsi[:, :, None] * dpsi[:, None, :] + 2 * d2psi)
    d2G = (d2E[:, None, None, :, :] * S[..., None, None]
           + dE[:, None, None, :, None] * dS[:, :, :, None, :]
           + dE[:, None, None, None, :] * dS[:, :, :, :, None]
           + E[:, None, None, None, None] * d2S)
    dlow = 0.5 * (np.einsum("ndcbe->ndbce", d2G) + d2G - np.einsum("nbcde->ndbce", d2G))
    dGinv = -np.einsum("nap,npqe,nqd->nade", Ginv, dG, Ginv)
    dgamma = np.einsum("nade,ndbc->nabce", dGinv, low) + np.einsum("nad,ndbce->nabce", Ginv, dlow)
    riem = 0.5 * (np.einsum("nadbc->nabcd", d2G) + np.einsum("nbcad->nabcd", d2G)
                  - np.einsum("nbdac->nabcd", d2G) - np.einsum("nacbd->nabcd", d2G))
    riem += np.einsum("nmbc,nmad->nabcd", low, gamma) - np.einsum("nmbd,nmac->nabcd", low, gamma)
    ricci = np.einsum("nac,nabcd->nbd", Ginv, riem)
    out.d2G, out.dgamma, out.riemann, out.ricci = d2G, dgamma, riem, ricci
    return out


@dataclass(frozen=True)
class AmbientTensors:
    metric: np.ndarray
    inverse: np.ndarray
    christoffel: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray


def tensors_at(model: AmbientModel, x0: float, x) -> AmbientTensors:
    """All ambient tensors at the single point (x0, x)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != model.base_dim:
        raise ValueError("base point has wrong dimension")
    model.check_range(x0)
    f = ambient_fields(model, np.concatenate([[x0], x])[None, :], second=True)
    return AmbientTensors(f.G[0], f.Ginv[0], f.gamma[0], f.riemann[0], f.ricci[0])


def spaceform_tensor(G, K):
    return K * (np.einsum("nac,nbd->nabcd", G, G) - np.einsum("nad,nbc->nabcd", G, G))


def spaceform_residual(model: AmbientModel, samples=None, count: int = 100,
                       seed: int = DEFAULT_SEED) -> float:
    """Max relative deviation of the Riemann tensor from the constant-curvature form."""
    if model.spaceform_K is None:
        raise NotASpaceForm(model.model_id)
    if samples is None:
        samples = model.sample_points(np.random.default_rng(seed), count)
    f = ambient_fields(model, samples, second=True)
    Q = spaceform_tensor(f.G, 1.0)
    dev = np.abs(f.riemann - model.spaceform_K * Q).reshape(len(Q), -1).max(axis=1)
    scale = np.abs(Q).reshape(len(Q), -1).max(axis=1)
    return float(np.max(dev / scale))


@dataclass(frozen=True)
class Region:
    """Closed x0 interval times a set of base points (None means random base samples)."""

    x0_interval: tuple[float, float]
    base_points: np.ndarray | None = None

    def check(self, model: AmbientModel) -> None:
        lo, hi = self.x0_interval
        if lo > hi:
            raise ValueError("empty x0 interval")
        model.check_range([lo, hi])

    def sample(self, model: AmbientModel, rng, count: int) -> np.ndarray:
        lo, hi = self.x0_interval
        if self.base_points is not None:
            pts = np.atleast_2d(np.asarray(self.base_points, dtype=float))
            if lo == hi and len(pts) == 1:
                return np.concatenate([[lo], pts[0]])[None, :]
            base = pts[rng.integers(0, len(pts), count)]
        else:
            base = model.sample_base(rng, count)
        t = rng.uniform(lo, hi, count)
        t[0], t[-1] = lo, hi
        return np.column_stack([t, base])


@dataclass(frozen=True)
class RicciScan:
    min_value: float
    passed: bool
    seed: int
    n_samples: int


def ricci_timelike_scan(model: AmbientModel, region: Region, Lambda: float, n_samples: int,
                        seed: int = DEFAULT_SEED, max_rapidity: float = 3.0) -> RicciScan:
    """Minimum of Ric(nu, nu) over seeded unit timelike vectors nu in the region."""
    if model.signature != LORENTZIAN:
        raise WrongSignature("timelike Ricci scan needs a Lorentzian model")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    region.check(model)
    rng = np.random.default_rng(seed)
    X = region.sample(model, rng, n_samples)
    m = len(X)
    f = ambient_fields(model, X, second=True)
    n = model.base_dim
    w = rng.standard_normal((m, n))
    s = f.G[:, 1:, 1:]
    w /= np.sqrt(np.einsum("ni,nij,nj->n", w, s, w))[:, None]
    beta = rng.uniform(-max_rapidity, max_rapidity, m)
    beta[0] = 0.0
    nu = np.zeros((m, n + 1))
    nu[:, 0] = np.cosh(beta) * np.exp(-f.psi)
    nu[:, 1:] = np.sinh(beta)[:, None] * w
    vals = np.einsum("na,nab,nb->n", nu, f.ricci, nu)
    lo = float(vals.min())
    return RicciScan(lo, bool(lo >= -Lambda - 1e-10), seed, m)


@dataclass(frozen=True)
class ConvexityCertificate:
    success: bool
    lam: float | None
    margin: float
    ladder: tuple
    seed: int


def _convexity_margin(f: AmbientFields, lam: float) -> float:
    # chi = e^{lam t}; chi_ab e^{-lam t} = lam^2 t_a t_b + lam t_ab with t_ab = -Gamma^0_ab
    N, D, _ = f.G.shape
    A = -lam * f.gamma[:, 0, :, :]
    A[:, 0, 0] += lam * lam
    ref = f.G.copy()
    ref[:, 0, 0] = np.abs(ref[:, 0, 0])
    L = np.linalg.cholesky(ref)
    Li = np.linalg.inv(L)
    C = Li @ A @ np.swapaxes(Li, 1, 2)
    return float(np.linalg.eigvalsh(0.5 * (C + np.swapaxes(C, 1, 2)))[:, 0].min())


def convexity_certificate(model: AmbientModel, region: Region, lambda_max: float = 2.0 ** 16,
                          n_samples: int = 1000, seed: int = DEFAULT_SEED) -> ConvexityCertificate:
    """Search the ladder 1, 2, 4, ... for lam making e^{lam x0} strictly convex.

    Positivity is measured against the Riemannian reference metric
    e^{2 psi}(dt^2 + sigma_ij dx^i dx^j).  The reported margin is the smallest
    generalized eigenvalue of the Hessian scaled by e^{-lam x0}.
    """
    region.check(model)
    rng = np.random.default_rng(seed)
    f = ambient_fields(model, region.sample(model, rng, n_samples))
    ladder = []
    lam = 1.0
    best = -np.inf
    while lam <= lambda_max:
        c = _convexity_margin(f, lam)
        ladder.append((lam, c))
        best = max(best, c)
        if c > 1e-12:
            return ConvexityCertificate(True, lam, c, tuple(ladder), seed)
        lam *= 2.0
    return ConvexityCertificate(False, None, best, tuple(ladder), seed)


def ladder_margins(model: AmbientModel, region: Region, lambdas, n_samples: int = 1000,
                   seed: int = DEFAULT_SEED):
    """Margins for explicit lam values on one fixed sample set."""
    region.check(model)
    f = ambient_fields(model, region.sample(model, np.random.default_rng(seed), n_samples))
    return [_convexity_margin(f, lam) for lam in lambdas]
