"""First-order operators on fields: z d/dz, sin(2theta) d/dtheta, the
angular-average tail integral L12, the scaling operator S_delta, and the
transport/stretching coefficients (U, V, Rcal) of a stream field.

Conventions:
  D_z f    = z df/dz, realized as zeta(1-zeta) d/dzeta on the compactified
             radial coordinate; exactly zero at z = 0 and z = inf.
  D_th f   = sin(2theta) df/dtheta.
  L12(f)(z) = int_z^inf (3/r) int_0^{pi/2} f(r,th) sin(th) cos^2(th) dth dr,
             accumulated from the far end on the compactified grid. The two
             endpoint values of the radial integrand (0/0 at z=0, 0*inf at
             z=inf) are closed by linear extrapolation in the map
             coordinate, which is exact for the profile family C z/(1+z)^2.
  S_delta f = f + (1+delta) D_z f.

Coefficients of a stream field Phi (Dirichlet role):
  U    = -3 Phi - alpha D_z Phi
  V    = dPhi/dtheta - tan(theta) Phi
  Rcal = (2 sin(th) Phi + alpha sin(th) D_z Phi + cos(th) dPhi/dtheta)/cos(th)
The printed alternative with alpha sin(2theta) D_z Phi in Rcal is available
behind rcal_variant="sin2theta".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grid import Field, Grid

__all__ = [
    "VelocityCoeffs",
    "apply_Dz",
    "apply_Dtheta",
    "apply_Sdelta",
    "L12",
    "L12_at_zero",
    "velocity_coeffs",
]


@dataclass
class VelocityCoeffs:
    """Angular transport U, radial transport V, stretching Rcal."""

    U: Field
    V: Field
    Rcal: Field


def _dtheta_values(f: Field) -> np.ndarray:
    op = "dtheta_dir" if f.role == "phi" else "dtheta"
    return (f.grid.op(op) @ f.values.T).T


def apply_Dz(f: Field) -> Field:
    """z d/dz, computed as zeta(1-zeta) d/dzeta; exactly 0 at z = 0."""
    g = f.grid
    return f.with_values(g.op("Dz") @ f.values)


def apply_ddz(f: Field) -> Field:
    """Plain d/dz (used for traces at z = 0); zero row at the infinity node."""
    return f.with_values(f.grid.op("ddz") @ f.values)


def apply_Dtheta(f: Field) -> Field:
    """sin(2theta) d/dtheta with role-appropriate boundary stencils."""
    g = f.grid
    return f.with_values(_dtheta_values(f) * g.sin2t[None, :])


def apply_dtheta(f: Field) -> Field:
    """Plain d/dtheta with role-appropriate boundary stencils."""
    return f.with_values(_dtheta_values(f))


def apply_Sdelta(f: Field, delta: float) -> Field:
    """f + (1 + delta) z df/dz."""
    return f.with_values(f.values + (1.0 + delta) * (f.grid.op("Dz") @ f.values))


def dtheta_gamma_matrix(grid: Grid, alpha: float, bias: str = "central"):
    """Angular derivative adapted to the profile's edge class.

    Fields carrying the (sin th cos^2 th)^(alpha/3) factor are only
    C^{0,alpha/3} at the theta boundaries, where plain one-sided stencils
    lose their order. The factored rule

        d_theta f = Gamma d_theta(f/Gamma) + Gamma' (f/Gamma)

    is exact when f/Gamma is theta-independent and second order on the
    Gamma-times-smooth class; Gamma at interior midpoint nodes is bounded
    away from zero, so the division is harmless. bias selects the
    underlying stencil ('central', or the upwind-biased 'up'/'down' used
    by transport assemblies). Cached per (grid, alpha, bias).
    """
    key = ("dtheta_gamma", float(alpha), bias)
    M = grid._ops.get(key)
    if M is None:
        import scipy.sparse as sp

        th = grid.theta_nodes
        u = np.sin(th) * np.cos(th) ** 2
        gam = u ** (alpha / 3.0)
        dgam = (alpha / 3.0) * u ** (alpha / 3.0 - 1.0) * np.cos(th) * (
            1.0 - 3.0 * np.sin(th) ** 2
        )
        D = grid.op("dtheta" if bias == "central" else f"dtheta_{bias}")
        M = (sp.diags(gam) @ D + sp.diags(dgam)) @ sp.diags(1.0 / gam)
        grid._ops[key] = M.tocsr()
        M = grid._ops[key]
    return M


def _angular_moment(f: Field) -> np.ndarray:
    """m(z) = int f(z,theta) sin(theta) cos^2(theta) dtheta at each node."""
    g = f.grid
    kernel = g.sin_theta * g.cos_theta**2 * g.quad_theta
    return f.values @ kernel


def _radial_integrand(f: Field, warn: bool) -> np.ndarray:
    """P(sigma) = (3 m(z)/z) dz/dsigma with extrapolated endpoint values."""
    g = f.grid
    m = _angular_moment(f)
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = g.dzeta_dsigma / (1.0 - g.zeta_nodes) ** 2
        P = 3.0 * m / g.z_nodes * jac
    scale = np.max(np.abs(m))
    if warn and scale > 0 and abs(m[0]) > 1e-8 * scale:
        warnings.warn(
            "nonzero angular moment at z=0; L12 is singular there and the "
            "endpoint value is extrapolated",
            stacklevel=3,
        )
    P[0] = 2.0 * P[1] - P[2]
    P[-1] = 2.0 * P[-2] - P[-3]
    return P


def L12(f: Field, warn: bool = True) -> np.ndarray:
    """Radial profile of the tail integral; value at the last node is 0."""
    g = f.grid
    if warn:
        _decay_check(f)
    P = _radial_integrand(f, warn)
    h = g.h_sigma
    cell = 0.5 * h * (P[:-1] + P[1:])
    out = np.zeros(g.nz)
    out[:-1] = np.cumsum(cell[::-1])[::-1]
    if warn and np.max(np.abs(out)) > 0:
        # the last cell is the only extrapolation-dependent piece; it matters
        # when it is both large and the integrand is still growing outward
        growing = abs(P[-2]) > 1.001 * abs(P[-3])
        if growing and abs(cell[-1]) > 0.01 * np.max(np.abs(out)):
            warnings.warn(
                "far-field tail contributes more than 1% of L12; "
                "radial resolution may be insufficient",
                stacklevel=2,
            )
    return out


def L12_at_zero(f: Field) -> float:
    """L12(f)(0) without the diagnostic warnings (hot path for constraints)."""
    g = f.grid
    P = _radial_integrand(f, warn=False)
    return float(0.5 * g.h_sigma * np.sum(P[:-1] + P[1:]))


def _decay_check(f: Field) -> None:
    """Warn when |f| fails the C/sqrt(z) decay proxy on the outer 10% of nodes."""
    g = f.grid
    if np.abs(f.values).max() == 0.0:
        return
    n_tail = max(2, g.nz // 10)
    vals = np.abs(f.values[-n_tail:-1]).max(axis=1)
    z = g.z_safe[-n_tail:-1]
    # C estimated mid-grid; generous factor so only genuine growth trips it
    mid = np.abs(f.values[g.nz // 2]).max() * np.sqrt(g.z_safe[g.nz // 2])
    if np.any(vals * np.sqrt(z) > 10.0 * mid + 1e-300):
        warnings.warn("field decays slower than C/sqrt(z) on the tail", stacklevel=3)


def velocity_coeffs(Phi: Field, alpha: float, rcal_variant: str = "sintheta") -> VelocityCoeffs:
    """Transport and stretching coefficients of a stream field."""
    if Phi.role != "phi":
        Phi = Phi.copy(role="phi")
    g = Phi.grid
    dz_phi = g.op("Dz") @ Phi.values
    dth_phi = _dtheta_values(Phi)

    U = -3.0 * Phi.values - alpha * dz_phi
    V = dth_phi - g.tan_theta[None, :] * Phi.values
    if rcal_variant == "sintheta":
        radial = alpha * g.sin_theta[None, :] * dz_phi
    elif rcal_variant == "sin2theta":
        radial = alpha * g.sin2t[None, :] * dz_phi
    else:
        raise ValueError(f"unknown rcal_variant {rcal_variant!r}")
    R = (2.0 * g.sin_theta[None, :] * Phi.values + radial) / g.cos_theta[None, :] + dth_phi

    mk = lambda v: Field(g, v, "generic")
    return VelocityCoeffs(U=mk(U), V=mk(V), Rcal=mk(R))
