"""Finite-difference calculus on the compact base manifold.

Three topologies are supported:

* ``circle``: uniform periodic grid on [0, 2pi), n = 1.
* ``torus2``: uniform periodic grid on [0, 2pi)^2, n = 2.
* ``sphere-axisym``: cell-centred polar angles theta_k = (k + 1/2) pi / K on the
  round sphere, n = 2, for rotationally symmetric fields only.  Ghost values
  come from even reflection across each pole; every phi derivative is zero.

Fields are flat numpy arrays in row-major axis order, optionally with trailing
tensor dimensions (shape ``(N, ...)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadResolution, DegenerateMetric

TOPOLOGIES = ("circle", "torus2", "sphere-axisym")

# central weights for offsets 1..m: first derivatives pair (f[+j] - f[-j]), second
# derivatives pair (f[+j] + f[-j] - 2 f[0]); both forms vanish exactly on constants
_D1 = {2: np.array([0.5]), 4: np.array([8.0, -1.0]) / 12.0}
_D2 = {2: np.array([1.0]), 4: np.array([16.0, -1.0]) / 12.0}


@dataclass(frozen=True, eq=False)
class BaseGrid:
    topology: str
    shape: tuple
    h: tuple
    order: int
    coords: tuple

    @property
    def n(self) -> int:
        """Dimension of the base manifold."""
        return 1 if self.topology == "circle" else 2

    @property
    def active(self) -> int:
        """Number of axes carrying grid resolution."""
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def base_kind(self) -> str:
        return "round" if self.topology == "sphere-axisym" else "flat"

    @property
    def fiber_measure(self) -> float:
        """Measure of the symmetry fibre that integrate() leaves out (2pi in phi)."""
        return 2 * np.pi if self.topology == "sphere-axisym" else 1.0

    @property
    def halo(self) -> int:
        return self.order // 2

    def points(self) -> np.ndarray:
        """Base coordinates of every node, shape (N, n)."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        if self.topology == "sphere-axisym":
            pts = np.column_stack([pts[:, 0], np.zeros(len(pts))])
        return pts

    def reshape(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.size:
            raise ValueError(f"field has {f.shape[0]} entries, grid has {self.size}")
        return f.reshape(self.shape + f.shape[1:])

    def pad(self, F, axis: int, width: int, parity: int = 1):
        """Pad a reshaped field along one grid axis with ghost values.

        On the axisymmetric sphere ghosts are mirror images across the pole,
        multiplied by ``parity`` (-1 for quantities odd under the reflection).
        """
        pads = [(0, 0)] * F.ndim
        pads[axis] = (width, width)
        if self.topology != "sphere-axisym":
            return np.pad(F, pads, mode="wrap")
        P = np.pad(F, pads, mode="symmetric")
        if parity == -1:
            lo = [slice(None)] * F.ndim
            hi = [slice(None)] * F.ndim
            lo[axis] = slice(0, width)
            hi[axis] = slice(P.shape[axis] - width, None)
            P[tuple(lo)] *= -1
            P[tuple(hi)] *= -1
        return P


def make_grid(topology: str, resolution, order: int | None = None) -> BaseGrid:
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}")
    if order is None:
        order = 2 if topology == "sphere-axisym" else 4
    if order not in (2, 4):
        raise ValueError("stencil order must be 2 or 4")
    axes = 2 if topology == "torus2" else 1
    res = tuple(int(r) for r in np.broadcast_to(np.atleast_1d(resolution), (axes,)))
    if any(r < 8 for r in res):
        raise BadResolution(f"resolution {res} below 8")
    if topology == "sphere-axisym":
        K = res[0]
        h = (np.pi / K,)
        coords = ((np.arange(K) + 0.5) * h[0],)
    else:
        h = tuple(2 * np.pi / r for r in res)
        coords = tuple(np.arange(r) * hh for r, hh in zip(res, h))
    return BaseGrid(topology, res, h, order, coords)


def _stencil(grid: BaseGrid, F, axis: int, weights, parity: int = 1, second: bool = False):
    m = len(weights)
    P = grid.pad(F, axis, m, parity)
    L = F.shape[axis]
    out = np.zeros_like(F)
    for j, w in enumerate(weights, start=1):
        hi = np.take(P, np.arange(m + j, m + j + L), axis=axis)
        lo = np.take(P, np.arange(m - j, m - j + L), axis=axis)
        out += w * ((hi - F) + (lo - F) if second else hi - lo)
    return out


def derivative(grid: BaseGrid, f, axes, parity: int = 1) -> np.ndarray:
    """Central difference derivative along ``axes`` (e.g. (0,), (0, 0), (0, 1)).

    Axes beyond the active ones (phi on the axisymmetric sphere) give zero.
    ``parity`` = -1 marks fields that change sign under the polar reflection,
    such as the theta component of a vector.
    """
    axes = tuple(axes)
    if len(axes) not in (1, 2) or any(a < 0 or a >= grid.n for a in axes):
        raise ValueError(f"bad derivative axes {axes}")
    f = np.asarray(f, dtype=float)
    if any(a >= grid.active for a in axes):
        return np.zeros_like(f)
    F = grid.reshape(f)
    if len(axes) == 1:
        a = axes[0]
        out = _stencil(grid, F, a, _D1[grid.order], parity) / grid.h[a]
    elif axes[0] == axes[1]:
        a = axes[0]
        out = _stencil(grid, F, a, _D2[grid.order], parity, second=True) / grid.h[a] ** 2
    else:
        a, b = axes
        tmp = _stencil(grid, F, a, _D1[grid.order], parity) / grid.h[a]
        out = _stencil(grid, tmp, b, _D1[grid.order], -parity) / grid.h[b]
    return out.reshape(f.shape)


def gradient(grid: BaseGrid, f, parity: int = 1) -> np.ndarray:
    """All first partials, shape f.shape + (n,)."""
    return np.stack([derivative(grid, f, (i,), parity) for i in range(grid.n)], axis=-1)


def hessian(grid: BaseGrid, f) -> np.ndarray:
    """All second partials, shape f.shape + (n, n)."""
    n = grid.n
    f = np.asarray(f, dtype=float)
    out = np.zeros(f.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            d = derivative(grid, f, (i, j))
            out[..., i, j] = d
            out[..., j, i] = d
    return out


def _face_flux_divergence(grid: BaseGrid, F, A, axis: int):
    """d_axis (A d_axis F) with staggered faces; exact on constants, self-adjoint."""
    h = grid.h[axis]
    L = F.shape[axis]
    if grid.order == 2:
        P, Q = grid.pad(F, axis, 1), grid.pad(A, axis, 1)
        # faces k-1/2 for k = 0..L (L+1 faces)
        lo, hi = np.arange(0, L + 1), np.arange(1, L + 2)
        grad = (np.take(P, hi, axis=axis) - np.take(P, lo, axis=axis)) / h
        coef = 0.5 * (np.take(Q, hi, axis=axis) + np.take(Q, lo, axis=axis))
        flux = coef * grad
        return (np.take(flux, np.arange(1, L + 1), axis=axis)
                - np.take(flux, np.arange(0, L), axis=axis)) / h
    # the density sqrt(g) continues oddly through a pole; mirroring it with a
    # sign keeps the fourth-order face interpolation accurate there
    P, Q = grid.pad(F, axis, 3), grid.pad(A, axis, 3, parity=-1)
    # faces k-1/2 for k = -1..L+1 use padded nodes k-2..k+1
    idx = [np.arange(j, j + L + 3) for j in range(4)]
    t = [np.take(P, i, axis=axis) for i in idx]
    c = [np.take(Q, i, axis=axis) for i in idx]
    grad = (t[0] - 27 * t[1] + 27 * t[2] - t[3]) / (24 * h)
    coef = (-c[0] + 9 * c[1] + 9 * c[2] - c[3]) / 16
    flux = coef * grad
    s = [np.take(flux, np.arange(j, j + L), axis=axis) for j in range(4)]
    return (s[0] - 27 * s[1] + 27 * s[2] - s[3]) / (24 * h)


def div_form(grid: BaseGrid, f, A) -> np.ndarray:
    """sum_ij d_i (A^ij d_j f) for a symmetric coefficient field A of shape (N, n, n)."""
    F = grid.reshape(f)
    A = np.asarray(A, dtype=float)
    out = np.zeros_like(F)
    m = grid.active
    for i in range(m):
        out += _face_flux_divergence(grid, F, grid.reshape(A[:, i, i]), i)
    for i in range(m):
        for j in range(m):
            if i != j:
                dj = grid.reshape(derivative(grid, f, (j,)))
                w = (grid.reshape(A[:, i, j]) * dj).ravel()
                out += grid.reshape(derivative(grid, w, (i,)))
    return out.ravel()


def laplace_beltrami(grid: BaseGrid, f, g, sqrt_det_g) -> np.ndarray:
    """Divergence-form Laplacian (1/sqrt g) d_i (sqrt g g^ij d_j f)."""
    g = np.asarray(g, dtype=float)
    sqrt_det_g = np.asarray(sqrt_det_g, dtype=float)
    if np.any(np.linalg.eigvalsh(g)[:, 0] <= 0) or np.any(sqrt_det_g <= 0):
        raise DegenerateMetric("metric not positive definite")
    A = sqrt_det_g[:, None, None] * np.linalg.inv(g)
    return div_form(grid, f, A) / sqrt_det_g


def integrate(density, grid: BaseGrid) -> float:
    """Midpoint/trapezoidal rule h_1 h_2 ... sum(density); no fibre factor."""
    return float(np.prod(grid.h) * np.sum(density))
