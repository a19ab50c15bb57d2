"""Discrete (z, theta) domain on [0, inf) x [0, pi/2].

The radial half-line is compactified through zeta = z / (1 + z); nodes are
uniform in a map coordinate sigma in [0, 1] with an optional one-sided
stretching zeta = 1 - (1 - sigma)**stretch that pushes resolution toward
large z. Both endpoints are genuine nodes: sigma = 0 is z = 0 (traces are
direct reads) and sigma = 1 is z = inf, where every operator built from
z d/dz degenerates to zero and decaying fields carry their far-field limit.

Angular nodes are interior midpoints of a uniform partition of [0, pi/2],
so tan(theta) and 1/cos(theta) are only ever evaluated where they are
finite. Dirichlet behaviour at theta = 0, pi/2 enters through ghost-value
stencils, not through boundary nodes.

All radial coefficient functions should be written in zeta form
(1/(1+z) = 1-zeta, z/(1+z) = zeta, ...) so the infinity node stays finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline

__all__ = ["Grid", "Field", "build_grid", "interpolate"]

# sampling stand-in for the z=inf node when a caller insists on a z-callable
_Z_BIG = 1.0e14


def _stretch_map(sigma: np.ndarray, stretch: float) -> tuple[np.ndarray, np.ndarray]:
    """zeta(sigma) and d zeta / d sigma for the one-sided stretching."""
    if stretch == 1.0:
        return sigma.copy(), np.ones_like(sigma)
    zeta = 1.0 - (1.0 - sigma) ** stretch
    dzeta = stretch * (1.0 - sigma) ** (stretch - 1.0)
    return zeta, dzeta


@dataclass(frozen=True)
class Grid:
    """Immutable tensor-product discretization; safe to share read-only."""

    nz: int
    ntheta: int
    stretch: float
    sigma: np.ndarray        # uniform map coordinate, shape (nz,)
    zeta_nodes: np.ndarray   # zeta = z/(1+z), in [0, 1]
    z_nodes: np.ndarray      # z = zeta/(1-zeta); last entry is inf
    theta_nodes: np.ndarray  # interior midpoints in (0, pi/2)
    quad_z: np.ndarray       # weights for int_0^inf f dz (endpoint nodes weight 0)
    quad_theta: np.ndarray   # midpoint weights for int_0^{pi/2} f dtheta
    h_sigma: float
    h_theta: float
    dzeta_dsigma: np.ndarray

    # derived operators, filled in by build_grid
    _ops: dict = field(default_factory=dict, repr=False, compare=False)

    # -- convenience views -------------------------------------------------

    @property
    def one_minus_zeta(self) -> np.ndarray:
        """1/(1+z) at the radial nodes, exact at both endpoints."""
        return 1.0 - self.zeta_nodes

    @property
    def z_safe(self) -> np.ndarray:
        """z with the infinity node replaced by a large finite stand-in."""
        z = self.z_nodes.copy()
        z[-1] = _Z_BIG
        return z

    @property
    def tan_theta(self) -> np.ndarray:
        return np.tan(self.theta_nodes)

    @property
    def sin2t(self) -> np.ndarray:
        return np.sin(2.0 * self.theta_nodes)

    @property
    def cos_theta(self) -> np.ndarray:
        return np.cos(self.theta_nodes)

    @property
    def sin_theta(self) -> np.ndarray:
        return np.sin(self.theta_nodes)

    def op(self, name: str) -> sp.csr_matrix:
        """Stored differentiation matrix (see build_grid for the catalogue)."""
        return self._ops[name]

    # -- quadrature --------------------------------------------------------

    def integrate_theta(self, values: np.ndarray) -> np.ndarray:
        """Midpoint quadrature over theta along the last axis."""
        return values @ self.quad_theta

    def integrate_z(self, values: np.ndarray) -> np.ndarray:
        """Radial quadrature of nodal values of f against dz, along axis 0."""
        return np.tensordot(self.quad_z, values, axes=(0, 0))

    def integrate(self, values: np.ndarray) -> float:
        """Full dz dtheta quadrature of a (nz, ntheta) array."""
        return float(self.quad_z @ values @ self.quad_theta)


@dataclass
class Field:
    """Scalar samples on a Grid with a role tag steering boundary stencils.

    Roles: 'eps', 'uphi', 'phi', 'F', 'omega', 'generic'. Only 'phi' has the
    Dirichlet angular extension (odd through theta = 0 and pi/2).
    """

    grid: Grid
    values: np.ndarray
    role: str = "generic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.nz, self.grid.ntheta):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid "
                f"({self.grid.nz}, {self.grid.ntheta})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite everywhere")

    @classmethod
    def from_function(cls, grid: Grid, f, role: str = "generic") -> "Field":
        """Sample f(z, theta); the infinity node is sampled at a large z."""
        zz = grid.z_safe[:, None]
        tt = grid.theta_nodes[None, :]
        return cls(grid, np.broadcast_to(f(zz, tt), (grid.nz, grid.ntheta)).copy(), role)

    @classmethod
    def from_zeta_function(cls, grid: Grid, f, role: str = "generic") -> "Field":
        """Sample f(zeta, theta); exact at both radial endpoints."""
        zz = grid.zeta_nodes[:, None]
        tt = grid.theta_nodes[None, :]
        return cls(grid, np.broadcast_to(f(zz, tt), (grid.nz, grid.ntheta)).copy(), role)

    @classmethod
    def zeros(cls, grid: Grid, role: str = "generic") -> "Field":
        return cls(grid, np.zeros((grid.nz, grid.ntheta)), role)

    def copy(self, role: str | None = None) -> "Field":
        return Field(self.grid, self.values.copy(), self.role if role is None else role)

    def with_values(self, values: np.ndarray, role: str | None = None) -> "Field":
        return Field(self.grid, values, self.role if role is None else role)


def _dsigma_matrix(n: int, h: float) -> sp.csr_matrix:
    """Second-order d/dsigma: central interior, one-sided at the endpoints."""
    D = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        D[j, j - 1] = -0.5 / h
        D[j, j + 1] = 0.5 / h
    D[0, 0], D[0, 1], D[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    D[n - 1, n - 1], D[n - 1, n - 2], D[n - 1, n - 3] = 1.5 / h, -2.0 / h, 0.5 / h
    return D.tocsr()


def _dsigma_biased(n: int, h: float, backward: bool) -> sp.csr_matrix:
    """Second-order upwind-biased d/dsigma.

    Pure central differences leave the odd-even lattice mode invisible to
    first-order transport, which is fatal for steady transport equations;
    the 3-point biased stencil couples the parities (and adds the usual
    O(h^2) upwind dissipation). Rows without enough neighbours fall back
    to central / one-sided.
    """
    D = sp.lil_matrix((n, n))
    if backward:  # information from smaller sigma
        for j in range(2, n):
            D[j, j] = 1.5 / h
            D[j, j - 1] = -2.0 / h
            D[j, j - 2] = 0.5 / h
        D[1, 0], D[1, 2] = -0.5 / h, 0.5 / h
        D[0, 0], D[0, 1], D[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    else:
        for j in range(0, n - 2):
            D[j, j] = -1.5 / h
            D[j, j + 1] = 2.0 / h
            D[j, j + 2] = -0.5 / h
        D[n - 2, n - 3], D[n - 2, n - 1] = -0.5 / h, 0.5 / h
        D[n - 1, n - 1], D[n - 1, n - 2], D[n - 1, n - 3] = 1.5 / h, -2.0 / h, 0.5 / h
    return D.tocsr()


def _dtheta_matrices(n: int, h: float) -> dict[str, sp.csr_matrix]:
    """Angular stencils on midpoint nodes.

    'dtheta'      : one-sided closure at the first/last node (generic fields)
    'dtheta_dir'  : ghost values by odd reflection through 0 and pi/2
    'd2theta_dir' : second derivative with the same odd ghosts
    """
    ops = {}
    ops["dtheta"] = _dsigma_matrix(n, h)

    Dd = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        Dd[j, j - 1] = -0.5 / h
        Dd[j, j + 1] = 0.5 / h
    # ghost f(-h/2) = -f(h/2) and f(pi/2 + h/2) = -f(pi/2 - h/2)
    Dd[0, 0] = 0.5 / h          # (f_1 - (-f_0)) / 2h
    Dd[0, 1] = 0.5 / h
    Dd[n - 1, n - 1] = -0.5 / h
    Dd[n - 1, n - 2] = -0.5 / h
    ops["dtheta_dir"] = Dd.tocsr()

    D2 = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        D2[j, j - 1] = 1.0 / h**2
        D2[j, j] = -2.0 / h**2
        D2[j, j + 1] = 1.0 / h**2
    D2[0, 0] = -3.0 / h**2       # (-f_0) - 2 f_0 + f_1
    D2[0, 1] = 1.0 / h**2
    D2[n - 1, n - 1] = -3.0 / h**2
    D2[n - 1, n - 2] = 1.0 / h**2
    ops["d2theta_dir"] = D2.tocsr()

    # even (symmetric) ghosts: for quantities like tan(theta) f with f of
    # Dirichlet type, which reflect evenly through both boundaries
    De = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        De[j, j - 1] = -0.5 / h
        De[j, j + 1] = 0.5 / h
    De[0, 0] = -0.5 / h
    De[0, 1] = 0.5 / h
    De[n - 1, n - 1] = 0.5 / h
    De[n - 1, n - 2] = -0.5 / h
    ops["dtheta_even"] = De.tocsr()
    return ops


def _angular_elliptic(theta: np.ndarray, h: float) -> dict[str, object]:
    """Flux-form discretization of A[phi] = -phi'' + (tan(theta) phi)' - 6 phi.

    Through phi = cos(theta) psi the operator is similar to the
    Sturm-Liouville form -(cos^3 psi')'/cos^3 - 4 psi, discretized with edge
    fluxes a = cos^3 at the uniform cell edges. The flux at theta = pi/2
    vanishes (natural boundary); at theta = 0 the Dirichlet condition on phi
    gives an odd ghost for psi. Returns the tridiagonal operator on phi, the
    symmetric pencil (T, M) on psi, and its full eigendecomposition.
    """
    n = theta.size
    edges = np.arange(n + 1) * h
    a = np.cos(edges) ** 3
    off = -a[1:-1] / h**2
    main = (a[:-1] + a[1:]) / h**2
    main[0] += a[0] / h**2  # odd ghost at theta = 0 doubles the first flux

    T = sp.diags([off, main, off], offsets=(-1, 0, 1), format="csr")
    M = np.cos(theta) ** 3

    c = np.cos(theta)
    # A_theta,h = diag(1/cos^2) T diag(1/cos) - 4 I on phi values
    Ath = sp.diags(1.0 / c**2) @ T @ sp.diags(1.0 / c) - 4.0 * sp.identity(n)

    # symmetric standard form: B = M^{-1/2} T M^{-1/2}
    s = 1.0 / np.sqrt(M)
    B = (T.multiply(np.outer(s, s))).toarray()
    evals, evecs = np.linalg.eigh(B)
    lam = evals - 4.0                      # eigenvalues of A_theta,h
    psi_modes = evecs * s[:, None]         # M-orthonormal psi eigenvectors

    return {"A_theta": Ath.tocsr(), "lam": lam, "psi_modes": psi_modes, "M": M}


def build_grid(nz: int, ntheta: int, stretch: float = 1.0) -> Grid:
    """Construct the discrete domain with stencils and quadrature rules."""
    if nz < 8 or ntheta < 8:
        raise ValueError("nz and ntheta must both be at least 8")
    if not np.isfinite(stretch) or stretch <= 0:
        raise ValueError("stretch must be positive and finite")

    h = 1.0 / (nz - 1)
    sigma = np.linspace(0.0, 1.0, nz)
    zeta, dzeta = _stretch_map(sigma, stretch)
    with np.errstate(divide="ignore"):
        z = zeta / (1.0 - zeta)
    z[-1] = np.inf

    h_t = 0.5 * np.pi / ntheta
    theta = (np.arange(ntheta) + 0.5) * h_t
    quad_theta = np.full(ntheta, h_t)

    # radial rule: trapezoid in sigma with the first cell as a right rectangle
    # (the z=0 node never enters; weights stay positive) and the last cell
    # closed by linear endpoint extrapolation folded into the weights.
    w = np.full(nz, h)
    w[0] = 0.0
    w[1] = 1.5 * h
    w[-3] += -0.5 * h
    w[-2] = 2.0 * h
    w[-1] = 0.0
    with np.errstate(divide="ignore"):
        jac = dzeta / (1.0 - zeta) ** 2  # dz/dsigma
    jac_finite = jac.copy()
    jac_finite[-1] = 0.0
    quad_z = w * jac_finite

    grid = Grid(
        nz=nz,
        ntheta=ntheta,
        stretch=stretch,
        sigma=sigma,
        zeta_nodes=zeta,
        z_nodes=z,
        theta_nodes=theta,
        quad_z=quad_z,
        quad_theta=quad_theta,
        h_sigma=h,
        h_theta=h_t,
        dzeta_dsigma=dzeta,
    )

    Dsig = _dsigma_matrix(nz, h)
    # D_z = z d/dz = [zeta(1-zeta)/zeta'(sigma)] d/dsigma, coefficient 0 at both ends
    c_dz = np.zeros(nz)
    c_dz[1:-1] = zeta[1:-1] * (1.0 - zeta[1:-1]) / dzeta[1:-1]
    Dz = sp.diags(c_dz) @ Dsig
    # plain d/dz = [(1-zeta)^2/zeta'] d/dsigma, zero row at infinity only
    c_ddz = (1.0 - zeta) ** 2 / dzeta
    c_ddz[-1] = 0.0
    Ddz = sp.diags(c_ddz) @ Dsig
    # (1+z) d/dz = [(1-zeta)/zeta'] d/dsigma, regular at both ends
    c_a = (1.0 - zeta) / dzeta
    c_a[-1] = 0.0
    Aop = sp.diags(c_a) @ Dsig

    # compact 3-point z^2 d2/dz2: as D_z D_z - D_z it is blind to the
    # odd-even radial mode (D_z central annihilates it), which deprives the
    # elliptic solves of their parity control; the compact form keeps the
    # full second-difference response.
    D2sig = sp.lil_matrix((nz, nz))
    for j in range(1, nz - 1):
        D2sig[j, j - 1] = 1.0 / h**2
        D2sig[j, j] = -2.0 / h**2
        D2sig[j, j + 1] = 1.0 / h**2
    D2sig = D2sig.tocsr()
    if stretch == 1.0:
        ddzeta = np.zeros(nz)
    else:
        ddzeta = -stretch * (stretch - 1.0) * (1.0 - sigma) ** (stretch - 2.0)
    zz = zeta**2 * (1.0 - zeta) ** 2
    c2 = np.zeros(nz)
    c1 = np.zeros(nz)
    c2[1:-1] = zz[1:-1] / dzeta[1:-1] ** 2
    c1[1:-1] = (
        -zz[1:-1] * ddzeta[1:-1] / dzeta[1:-1] ** 3
        - 2.0 * zeta[1:-1] ** 2 * (1.0 - zeta[1:-1]) / dzeta[1:-1]
    )
    Z2D2 = sp.diags(c2) @ D2sig + sp.diags(c1) @ Dsig

    ops = {
        "dsigma": Dsig,
        "Dz": Dz.tocsr(),
        "ddz": Ddz.tocsr(),
        "one_plus_z_ddz": Aop.tocsr(),
        "z2_d2z": Z2D2.tocsr(),
    }
    for name, backward in (("up", True), ("down", False)):
        Db = _dsigma_biased(nz, h, backward)
        ops[f"Dz_{name}"] = (sp.diags(c_dz) @ Db).tocsr()
        ops[f"dtheta_{name}"] = _dsigma_biased(ntheta, h_t, backward)
    ops.update(_dtheta_matrices(ntheta, h_t))
    ops.update(_angular_elliptic(theta, h_t))
    grid._ops.update(ops)
    return grid


_DECAYING_ROLES = {"eps", "uphi", "phi", "F", "omega"}


def interpolate(field: Field, z, theta) -> np.ndarray | float:
    """Piecewise-cubic interpolant of a field at (z, theta) points.

    Interpolation happens in (zeta, theta); any finite z maps inside the
    node range. Queries at z = inf return 0 for decaying roles and raise
    otherwise.
    """
    g = field.grid
    scalar = np.ndim(z) == 0 and np.ndim(theta) == 0
    z, theta = np.broadcast_arrays(np.asarray(z, float), np.asarray(theta, float))
    if np.any(z < 0) or np.any(theta < -1e-12) or np.any(theta > np.pi / 2 + 1e-12):
        raise ValueError("query outside [0, inf) x [0, pi/2]")
    infinite = ~np.isfinite(z)
    if np.any(infinite) and field.role not in _DECAYING_ROLES:
        raise ValueError(f"far-field limit undefined for role {field.role!r}")

    interp = RectBivariateSpline(g.zeta_nodes, g.theta_nodes, field.values, kx=3, ky=3)
    zf = np.where(infinite, 1.0, z)
    zq = np.where(infinite, 1.0, zf / (1.0 + zf))
    out = interp(zq.ravel(), np.clip(theta, 0.0, np.pi / 2).ravel(), grid=False)
    out = np.where(infinite.ravel(), 0.0, out).reshape(z.shape)
    return float(out) if scalar else out
