"""Sampling batteries for the structural inequalities behind curvature estimates.

Everything here works on kappa-space samples in an orthonormal frame, so no
PDE solve is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ambient import DEFAULT_SEED
from .curvfunc import Composite, CurvatureSpec, DeformSpec, concavity_gap, hessian_fd
from .geometry import admissible

HESSIAN_STEP = 1e-4
QUOTIENT_STEP = 1e-6


@dataclass(frozen=True)
class SampleSpec:
    composite: Composite
    n_samples: int = 10_000
    spread_floor: float = 1e-3
    seed: int = DEFAULT_SEED
    kappa_range: tuple = (0.25, 4.0)

    def __post_init__(self):
        if not self.spread_floor > 0:
            raise ValueError("spread floor must be positive")

    @property
    def n(self) -> int:
        return self.composite.spec.n


def standard_composite(kind: str, n: int) -> Composite:
    """Degree-one composites: H, K^{1/n}, H2^{1/2}."""
    spec = CurvatureSpec(kind, n)
    if kind == "H":
        return Composite(spec, DeformSpec("identity"))
    return Composite(spec, DeformSpec("power", float(spec.degree)))


def draw_kappa(sample: SampleSpec, rng) -> np.ndarray:
    """One sorted kappa in the interior of the cone with spread above the floor."""
    lo, hi = sample.kappa_range
    cone = sample.composite.cone
    reach = cone == "gamma_2" and sample.n > 2
    while True:
        if reach:
            # Gamma_2 is larger than the positive cone once n > 2; keep H2 away from 0
            k = rng.uniform(-hi / 4, hi, sample.n)
            H = k.sum()
            ok = H > 0 and 0.5 * (H * H - k @ k) > lo * lo
        else:
            k = np.exp(rng.uniform(np.log(lo), np.log(hi), sample.n))
            ok = True
        k.sort()
        if ok and k[-1] - k[0] > sample.spread_floor and admissible(k, cone):
            return k


def second_variation(comp: Composite, kappa, eta, step: float) -> float:
    """d^2/ds^2 Phi(F)(eig(diag(kappa) + s eta)) at s = 0, fourth-order central differences."""
    D = np.diag(kappa)
    f = [comp.value(np.linalg.eigvalsh(D + m * step * eta)) for m in (-2, -1, 0, 1, 2)]
    return float((-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * step ** 2))


def decomposition(comp: Composite, kappa, eta, step: float) -> float:
    """sum d2F/dk_i dk_j eta_ii eta_jj + sum_{i != j} (G_i - G_j)/(k_i - k_j) eta_ij^2."""
    Hs = hessian_fd(comp.gradient, kappa, step)
    d = np.diag(eta)
    total = float(d @ Hs @ d)
    G = comp.gradient(kappa)
    n = len(kappa)
    for i in range(n):
        for j in range(n):
            if i != j:
                if abs(kappa[i] - kappa[j]) < 1e-9:
                    q = Hs[i, i] - Hs[i, j]
                else:
                    q = (G[i] - G[j]) / (kappa[i] - kappa[j])
                total += q * eta[i, j] ** 2
    return total


@dataclass(frozen=True)
class ConcavityReport:
    n_samples: int
    pass_count: int
    worst_gap: float
    decomposition_residual: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.pass_count == self.n_samples


def run_concavity_battery(sample: SampleSpec, check_decomposition: bool = True) -> ConcavityReport:
    """Seeded (kappa, eta) draws; worst_gap is max(lhs - rhs), non-positive when all pass.

    The decomposition residual compares a direct second variation of the
    composite along diag(kappa) + s eta with the eigenvalue formula, scaled by
    max(1, |second variation|).
    """
    rng = np.random.default_rng(sample.seed)
    comp = sample.composite
    passes = 0
    worst = -np.inf
    dec = 0.0
    for _ in range(sample.n_samples):
        k = draw_kappa(sample, rng)
        A = rng.standard_normal((sample.n, sample.n))
        eta = 0.5 * (A + A.T)
        res = concavity_gap(comp, k, eta, QUOTIENT_STEP)
        passes += res.passed
        worst = max(worst, res.lhs - res.rhs)
        if check_decomposition:
            step = HESSIAN_STEP * max(1.0, float(np.abs(k).max()))
            # eigenvalue branches of diag(k) + s eta stay smooth only for s |eta| << gaps
            step = min(step, 1e-2 * float(np.diff(k).min()))
            direct = second_variation(comp, k, eta, step)
            err = abs(direct - decomposition(comp, k, eta, step)) / max(1.0, abs(direct))
            dec = max(dec, err)
    return ConcavityReport(sample.n_samples, int(passes), float(worst), float(dec), sample.seed)


@dataclass(frozen=True)
class GradientOrderReport:
    n_samples: int
    pass_count: int
    worst_violation: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.pass_count == self.n_samples


def run_gradient_order_battery(sample: SampleSpec, tol: float = 1e-12) -> GradientOrderReport:
    """Ascending kappa must give a descending gradient G_1 >= ... >= G_n."""
    rng = np.random.default_rng(sample.seed)
    passes = 0
    worst = 0.0
    for _ in range(sample.n_samples):
        k = draw_kappa(sample, rng)
        G = sample.composite.gradient(k)
        viol = float(np.max(np.diff(G), initial=0.0))
        worst = max(worst, viol)
        passes += viol <= tol
    return GradientOrderReport(sample.n_samples, int(passes), worst, sample.seed)


def boundary_decay(comp: Composite, n_rays: int = 100, seed: int = DEFAULT_SEED,
                   scales=(1e-2, 1e-4, 1e-6, 1e-8)) -> np.ndarray:
    """Composite values as kappa_1 -> 0 along random rays; shape (n_rays, len(scales))."""
    rng = np.random.default_rng(seed)
    n = comp.spec.n
    out = np.zeros((n_rays, len(scales)))
    for r in range(n_rays):
        rest = rng.uniform(0.5, 3.0, n - 1)
        for c, s in enumerate(scales):
            out[r, c] = comp.value(np.sort(np.concatenate([[s], rest])))
    return out
