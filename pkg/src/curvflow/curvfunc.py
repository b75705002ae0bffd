"""Curvature functions F(kappa), their cones, and monotone concave deformations Phi."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateSpread, NonPositiveArgument, OutsideCone
from .geometry import admissible

KINDS = ("H", "K", "H2")
DEFAULT_CONE = {"H": "all", "K": "gamma_plus", "H2": "gamma_2"}


@dataclass(frozen=True)
class CurvatureSpec:
    kind: str
    n: int
    cone: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown curvature function {self.kind!r}")
        if self.kind == "H2" and self.n < 2:
            raise ValueError("H2 needs n >= 2")
        if self.cone is None:
            object.__setattr__(self, "cone", DEFAULT_CONE[self.kind])

    @property
    def degree(self) -> int:
        return {"H": 1, "K": self.n, "H2": 2}[self.kind]


@dataclass(frozen=True)
class DeformSpec:
    kind: str = "identity"
    k: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "log", "power", "neg-inverse"):
            raise ValueError(f"unknown deformation {self.kind!r}")
        if self.kind == "power" and not (self.k and self.k > 0):
            raise ValueError("power deformation needs k > 0")


def parse_curvature(name: str, n: int) -> CurvatureSpec:
    return CurvatureSpec(name, n)


def parse_deform(name: str) -> DeformSpec:
    if name == "id":
        return DeformSpec("identity")
    if name == "log":
        return DeformSpec("log")
    if name == "sqrt":
        return DeformSpec("power", 2.0)
    if name == "neginv":
        return DeformSpec("neg-inverse")
    if name.startswith("pow:"):
        frac = Fraction(name[4:])
        if frac.numerator != 1 or frac.denominator < 1:
            raise ValueError(f"power deformation must be pow:1/k, got {name!r}")
        return DeformSpec("power", float(frac.denominator))
    raise ValueError(f"unknown deformation {name!r}")


def F_eval(spec: CurvatureSpec, kappa, check: bool = True):
    """Value and gradient dF/dkappa_i, vectorized over leading axes."""
    k = np.asarray(kappa, dtype=float)
    if check and not np.all(admissible(k, spec.cone)):
        raise OutsideCone(f"kappa outside {spec.cone}")
    if spec.kind == "H":
        return k.sum(axis=-1), np.ones_like(k)
    if spec.kind == "K":
        n = k.shape[-1]
        F = k.prod(axis=-1)
        # product of the other entries; avoids dividing by a vanishing kappa
        grad = np.stack([np.prod(np.delete(k, i, axis=-1), axis=-1) for i in range(n)], axis=-1)
        return F, grad
    H = k.sum(axis=-1)
    F = 0.5 * (H * H - (k * k).sum(axis=-1))
    return F, H[..., None] - k


def phi_eval(deform: DeformSpec, r):
    """(Phi, Phi', Phi'') at r."""
    r = np.asarray(r, dtype=float)
    if deform.kind == "identity":
        return r.copy(), np.ones_like(r), np.zeros_like(r)
    if np.any(r <= 0):
        raise NonPositiveArgument(f"{deform.kind} needs r > 0")
    if deform.kind == "log":
        return np.log(r), 1 / r, -1 / r ** 2
    if deform.kind == "neg-inverse":
        return -1 / r, 1 / r ** 2, -2 / r ** 3
    p = 1.0 / deform.k
    return r ** p, p * r ** (p - 1), p * (p - 1) * r ** (p - 2)


@dataclass(frozen=True)
class Composite:
    """Phi(F(kappa)) with its gradient."""

    spec: CurvatureSpec
    deform: DeformSpec

    @property
    def cone(self) -> str:
        return self.spec.cone

    def value(self, kappa):
        F, _ = F_eval(self.spec, kappa, check=False)
        return phi_eval(self.deform, F)[0]

    def gradient(self, kappa):
        F, dF = F_eval(self.spec, kappa, check=False)
        return phi_eval(self.deform, F)[1][..., None] * dF

    def is_degree_one(self) -> bool:
        d = self.spec.degree
        if self.deform.kind == "identity":
            return d == 1
        return self.deform.kind == "power" and abs(self.deform.k - d) < 1e-14


def eigenframe(g, h):
    """kappa ascending and a g-orthonormal frame E with E^T h E = diag(kappa)."""
    L = np.linalg.cholesky(g)
    Li = np.linalg.inv(L)
    C = Li @ h @ np.swapaxes(Li, -1, -2)
    kappa, Q = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    return kappa, np.swapaxes(Li, -1, -2) @ Q


def fij_field(spec: CurvatureSpec, g, h, grad_fn=None):
    """F^{ij} from stacked metrics and second fundamental forms.

    ``grad_fn`` maps sorted kappa to the eigenvalue gradient; it defaults to
    dF/dkappa_i of ``spec`` (pass Phi' F_i for a composite).
    """
    kappa, E = eigenframe(g, h)
    if grad_fn is None:
        if not np.all(admissible(kappa, spec.cone)):
            raise OutsideCone(f"kappa outside {spec.cone}")
        grad = F_eval(spec, kappa, check=False)[1]
    else:
        grad = grad_fn(kappa)
    Fij = np.einsum("nik,nk,njk->nij", E, grad, E)
    return 0.5 * (Fij + np.swapaxes(Fij, 1, 2))


def F_ij_tensor(spec: CurvatureSpec, geometry, node=None):
    """F^{ij} = dF/dh_ij in coordinates; stacked over nodes unless ``node`` is given.

    In the g-orthonormal eigenframe of the shape operator F^{ij} = diag(F_i);
    repeated eigenvalues need no special care because F_i = F_j there.
    """
    g, h = geometry.g, geometry.h
    if node is not None:
        return fij_field(spec, g[node:node + 1], h[node:node + 1])[0]
    return fij_field(spec, g, h)


def hessian_fd(grad, kappa, step):
    """Hessian from an analytic gradient by fourth-order central differences."""
    kappa = np.asarray(kappa, dtype=float)
    n = kappa.size
    Hs = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        Hs[:, i] = (-grad(kappa + 2 * e) + 8 * grad(kappa + e)
                    - 8 * grad(kappa - e) + grad(kappa - 2 * e)) / (12 * step)
    return 0.5 * (Hs + Hs.T)


@dataclass(frozen=True)
class GapResult:
    lhs: float
    rhs: float
    passed: bool


def concavity_gap(comp: Composite, kappa, eta, quotient_step: float = 1e-6) -> GapResult:
    """Both sides of the gradient-gap inequality in an orthonormal frame.

    lhs = sum_{i != j} (G_i - G_j)/(k_i - k_j) eta_ij^2
    rhs = 2/(k_n - k_1) sum_i (G_n - G_i) eta_ni^2
    where G is the gradient of the composite.  Coincident interior pairs use the
    limit G_ii - G_ij from a central difference of the gradient.
    """
    k = np.asarray(kappa, dtype=float)
    eta = np.asarray(eta, dtype=float)
    n = k.size
    spread = k[-1] - k[0]
    if spread < 1e-12:
        raise DegenerateSpread("kappa_n - kappa_1 below 1e-12")
    if not admissible(k, comp.cone):
        raise OutsideCone(f"kappa outside {comp.cone}")
    G = comp.gradient(k)
    lhs = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = k[i] - k[j]
            if abs(d) <= 1e-9 * max(1.0, abs(k[i])):
                s = quotient_step * max(abs(k[i]), 1e-12)
                e = np.zeros(n)
                e[i] = s
                col = (comp.gradient(k + e) - comp.gradient(k - e)) / (2 * s)
                q = col[i] - col[j]
            else:
                q = (G[i] - G[j]) / d
            lhs += q * eta[i, j] ** 2
    rhs = float(2.0 / spread * np.sum((G[-1] - G) * eta[-1, :] ** 2))
    return GapResult(float(lhs), rhs, bool(lhs <= rhs + 1e-10))
