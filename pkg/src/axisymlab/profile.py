"""Self-similar profile: explicit leading order and Newton correction.

Leading order:

    F*(z, theta) = (Gamma(theta)/c) 4 alpha z/(1+z)^2,
    Gamma = (sin th cos^2 th)^(alpha/3),
    c = 3 int_0^{pi/2} (sin th cos^2 th)^(1+alpha/3) dth,

where c is computed with the grid's own theta quadrature so that the
discrete L12(F*)(0) equals 4 alpha to machine precision.

The corrected profile solves the stationary system

    S_delta(F) + U(Phi_F) dF/dth + alpha V(Phi_F) D_z F = Rcal(Phi_F) F,
    L12(F)(0) = 4 alpha,

for the unknowns (interior nodal values of F, delta) by Newton iteration.
The Jacobian in F is exactly the linearized operator of the evolution
problem (the elliptic map eps -> Phi is linear), so each Newton step solves
a bordered linear system: dense for small grids, preconditioned GMRES with
the local transport part as preconditioner for large ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Field, Grid
from . import field_ops as fo
from .elliptic import StreamSolver, StreamSolution

__all__ = [
    "Profile",
    "F_star",
    "F_star_dtheta",
    "solve_profile",
    "solve_profile_continued",
    "prolong_profile",
    "profile_residual",
    "ProfileNonConvergence",
]


class ProfileNonConvergence(RuntimeError):
    def __init__(self, msg: str, best: "Profile"):
        super().__init__(msg)
        self.best = best


@dataclass
class Profile:
    F: Field
    delta: float
    alpha: float
    c_norm: float
    is_leading_order: bool
    stream: StreamSolution
    residual: float

    def check_invariants(self) -> None:
        assert np.all(self.F.values[1:-1, :] >= -1e-12), "F negative in the interior"
        assert np.abs(self.F.values[0]).max() == 0.0, "F(0,theta) != 0"
        ell0 = fo.L12_at_zero(self.F)
        assert abs(ell0 - 4 * self.alpha) <= 1e-6 * 4 * self.alpha
        assert 0.1 <= self.c_norm <= 10.0


def gamma_theta(theta: np.ndarray, alpha: float) -> np.ndarray:
    return (np.sin(theta) * np.cos(theta) ** 2) ** (alpha / 3.0)


def c_normalization(grid: Grid, alpha: float) -> float:
    """c = 3 * quadrature of (sin cos^2)^(1+alpha/3), on the grid's rule."""
    u = grid.sin_theta * grid.cos_theta**2
    return float(3.0 * np.sum(u ** (1.0 + alpha / 3.0) * grid.quad_theta))


def F_star(alpha: float, grid: Grid, delta: float = 0.0) -> Profile:
    """Leading-order profile with the grid-consistent normalization."""
    if not (0.0 < alpha <= 0.3):
        raise ValueError("alpha must lie in (0, 0.3]")
    c = c_normalization(grid, alpha)
    gam = gamma_theta(grid.theta_nodes, alpha)
    radial = 4.0 * alpha * grid.zeta_nodes * (1.0 - grid.zeta_nodes)
    F = Field(grid, np.outer(radial, gam / c), role="F")
    solver = StreamSolver(grid, alpha, backend="eig")
    stream = solver.solve(F, tol=1e-6)
    res = profile_residual(F, delta, alpha, stream)
    return Profile(
        F=F,
        delta=delta,
        alpha=alpha,
        c_norm=c,
        is_leading_order=True,
        stream=stream,
        residual=float(np.abs(res).max()),
    )


def stabilization_matrix(grid: Grid, alpha: float, c4: float | None = None):
    """Undivided fourth-difference stabilization (JST flavour).

    Central differences leave the odd-even lattice modes invisible to
    first-order transport, so the steady problem admits parasite content
    and its Newton matrices develop near-null clusters. The undivided
    fourth difference is O(h^4) on smooth fields (invisible at every
    acceptance tolerance) and O(1) on the parasites. The angular part acts
    on the Gamma cofactor so the profile's edge class stays clean. Rows
    without a full stencil carry no stabilization. Cached per grid/alpha.
    """
    if c4 is None:
        c4 = 0.5 * alpha  # scale with the physical transport terms
    key = ("stab4", float(alpha), float(c4))
    S = grid._ops.get(key)
    if S is not None:
        return S
    import scipy.sparse as sp

    def fourth(n):
        D = sp.lil_matrix((n, n))
        for j in range(2, n - 2):
            D[j, j - 2] = 1.0
            D[j, j - 1] = -4.0
            D[j, j] = 6.0
            D[j, j + 1] = -4.0
            D[j, j + 2] = 1.0
        return D.tocsr()

    th = grid.theta_nodes
    u = np.sin(th) * np.cos(th) ** 2
    gam = u ** (alpha / 3.0)
    D4t = sp.diags(gam) @ fourth(grid.ntheta) @ sp.diags(1.0 / gam)
    S = c4 * (
        sp.kron(fourth(grid.nz), sp.identity(grid.ntheta))
        + sp.kron(sp.identity(grid.nz), D4t)
    )
    grid._ops[key] = S.tocsr()
    return grid._ops[key]


def profile_residual(
    F: Field,
    delta: float,
    alpha: float,
    stream: StreamSolution,
    dtheta_F: np.ndarray | None = None,
    stabilize: bool = True,
) -> np.ndarray:
    """S_delta(F) + U dF/dth + alpha V D_z F - Rcal F (+ stabilization).

    dtheta_F overrides the angular derivative of F; pass the analytic
    derivative when measuring the continuum residual of F* (its Gamma
    factor is only C^{alpha/3} at the theta boundaries). stabilize adds
    the fourth-difference parasite control (see stabilization_matrix);
    switch it off to evaluate the bare displayed equation.
    """
    g = F.grid
    co = fo.velocity_coeffs(stream.Phi, alpha)
    if dtheta_F is None:
        Dt = fo.dtheta_gamma_matrix(g, alpha)
        dth = (Dt @ F.values.T).T
    else:
        dth = dtheta_F
    a_r = (1.0 + delta) + alpha * co.V.values
    dz = g.op("Dz") @ F.values
    base = F.values + a_r * dz + co.U.values * dth - co.Rcal.values * F.values
    if stabilize:
        S = stabilization_matrix(g, alpha)
        base = base + (S @ F.values.ravel()).reshape(g.nz, g.ntheta)
    return base


def F_star_dtheta(alpha: float, grid: Grid) -> np.ndarray:
    """Analytic theta-derivative of F* on the nodes."""
    c = c_normalization(grid, alpha)
    th = grid.theta_nodes
    u = np.sin(th) * np.cos(th) ** 2
    du = np.cos(th) * (1.0 - 3.0 * np.sin(th) ** 2)
    dgam = (alpha / 3.0) * u ** (alpha / 3.0 - 1.0) * du
    radial = 4.0 * alpha * grid.zeta_nodes * (1.0 - grid.zeta_nodes)
    return np.outer(radial, dgam / c)


def selected_transport_ops(
    grid: Grid, alpha: float, u_speed: np.ndarray, r_speed: np.ndarray
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Row-wise upwind-selected (gamma-factored dtheta, Dz) on flattened dofs."""
    mu = (u_speed.ravel() >= 0).astype(float)
    mr = (r_speed.ravel() >= 0).astype(float)
    Dt_up = sp.kron(
        sp.identity(grid.nz), fo.dtheta_gamma_matrix(grid, alpha, "up"), format="csr"
    )
    Dt_dn = sp.kron(
        sp.identity(grid.nz), fo.dtheta_gamma_matrix(grid, alpha, "down"), format="csr"
    )
    Dz_up = sp.kron(grid.op("Dz_up"), sp.identity(grid.ntheta), format="csr")
    Dz_dn = sp.kron(grid.op("Dz_down"), sp.identity(grid.ntheta), format="csr")
    Dt = sp.diags(mu) @ Dt_up + sp.diags(1.0 - mu) @ Dt_dn
    Dz = sp.diags(mr) @ Dz_up + sp.diags(1.0 - mr) @ Dz_dn
    return Dt.tocsr(), Dz.tocsr()


def _local_transport_matrix(
    grid: Grid, co, delta: float, alpha: float
) -> sp.csr_matrix:
    """Sparse local part of the linearization: S_delta + U dth + aV Dz - R."""
    n = grid.nz * grid.ntheta
    a_r = (1.0 + delta) + alpha * co.V.values
    Dz2 = sp.kron(grid.op("Dz"), sp.identity(grid.ntheta), format="csr")
    Dt2 = sp.kron(
        sp.identity(grid.nz), fo.dtheta_gamma_matrix(grid, alpha), format="csr"
    )
    I = sp.identity(n, format="csr")
    return (
        I
        + sp.diags(a_r.ravel()) @ Dz2
        + sp.diags(co.U.values.ravel()) @ Dt2
        - sp.diags(co.Rcal.values.ravel())
        + stabilization_matrix(grid, alpha)
    ).tocsr()


def stream_coefficient_ops(grid: Grid, alpha: float):
    """Sparse (U_op, V_op, R_op) with U(Phi) = U_op @ Phi etc."""
    g = grid
    Dz2 = sp.kron(g.op("Dz"), sp.identity(g.ntheta), format="csr")
    Dt2d = sp.kron(sp.identity(g.nz), g.op("dtheta_dir"), format="csr")
    I = sp.identity(g.nz * g.ntheta, format="csr")
    tant = np.tile(g.tan_theta, g.nz)
    sint = np.tile(g.sin_theta, g.nz)
    cost = np.tile(g.cos_theta, g.nz)
    U_op = (-3.0 * I - alpha * Dz2).tocsr()
    V_op = (Dt2d - sp.diags(tant)).tocsr()
    R_op = (
        sp.diags(2.0 * sint / cost) + alpha * sp.diags(sint / cost) @ Dz2 + Dt2d
    ).tocsr()
    return U_op, V_op, R_op


def _stream_coupling_matrix(
    grid: Grid, F: Field, alpha: float, co, delta: float
) -> sp.csr_matrix:
    """Sparse B with (dU dF/dth + dV Dz F - dR F) = B @ Phi_dF for the
    linearized coefficients of a stream increment (upwind-consistent)."""
    g = grid
    U_op, V_op, R_op = stream_coefficient_ops(g, alpha)
    dthF = ((fo.dtheta_gamma_matrix(g, alpha) @ F.values.T).T).ravel()
    dzF = (g.op("Dz") @ F.values).ravel()
    return (
        sp.diags(dthF) @ U_op
        + alpha * sp.diags(dzF) @ V_op
        - sp.diags(F.values.ravel()) @ R_op
    ).tocsr()


def _l12_zero_row(grid: Grid) -> np.ndarray:
    """Quadrature weights c with L12(f)(0) = c . f.ravel()."""
    kernel = grid.sin_theta * grid.cos_theta**2 * grid.quad_theta
    # radial weights of the trapezoid-with-extrapolated-endpoints rule
    h = grid.h_sigma
    nz = grid.nz
    wP = np.zeros(nz)  # weights applied to the radial integrand P_j
    wP[0] = 0.5 * h
    wP[-1] = 0.5 * h
    wP[1:-1] = h
    # endpoint extrapolation P_0 -> 2P_1 - P_2, P_last -> 2P_-2 - P_-3
    w = wP.copy()
    w[1] += 2.0 * wP[0]
    w[2] -= wP[0]
    w[-2] += 2.0 * wP[-1]
    w[-3] -= wP[-1]
    w[0] = 0.0
    w[-1] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        jac = grid.dzeta_dsigma / (1.0 - grid.zeta_nodes) ** 2
        radial = 3.0 * w * jac / grid.z_nodes
    radial[0] = 0.0
    radial[-1] = 0.0
    return np.outer(radial, kernel).ravel()


def solve_profile(
    alpha: float,
    grid: Grid,
    tol: float = 1e-10,
    max_iter: int = 60,
    start: Profile | None = None,
) -> Profile:
    """Damped Newton for (F, delta) with a family-gauge polish.

    The mu-rescaling family F(mu y) solves the same equation and leaves
    L12(F)(0) unchanged, so the bordered Jacobian carries a near-null
    direction (sigma_min -> 0 with h). Newton with a Levenberg ladder
    converges to a least-squares stall where the residual is locked in the
    left near-null direction; the locked defect tau is a function of the
    family coordinate with a nearby zero, found by regula falsi on honest
    mu-rescalings of the iterate (dense grids only; large grids stop at the
    stall, which is prolongation quality). Raises ProfileNonConvergence
    with the best iterate attached.
    """
    if alpha > 0.25:
        raise ValueError("alpha above the configured Newton basin bound 0.25")
    solver = StreamSolver(grid, alpha, backend="eig")
    prof = start if start is not None else F_star(alpha, grid)
    F = prof.F.copy()
    delta = prof.delta

    g = grid
    n_int = (g.nz - 2) * g.ntheta
    idx = (
        np.arange(1, g.nz - 1)[:, None] * g.ntheta
        + np.arange(g.ntheta)[None, :]
    ).ravel()
    crow = _l12_zero_row(g)[idx]
    dense = n_int <= 6500
    lam_ladder = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0)

    def residual_at(Fv: Field, dv: float):
        stream = solver.solve(Fv, tol=np.inf)
        res = profile_residual(Fv, dv, alpha, stream)
        gcon = fo.L12_at_zero(Fv) - 4.0 * alpha
        return res, gcon, max(np.abs(res[1:-1]).max(), abs(gcon)), stream

    def build_K(Fv, dv, stream):
        co = fo.velocity_coeffs(stream.Phi, alpha)
        A_loc = _local_transport_matrix(g, co, dv, alpha)[idx][:, idx].tocsc()
        B = _stream_coupling_matrix(g, Fv, alpha, co, dv)[idx].tocsr()
        K = np.zeros((n_int + 1, n_int + 1))
        K[:n_int, :n_int] = A_loc.toarray() + B @ solver.dense_inverse()[:, idx]
        K[:n_int, n_int] = (g.op("Dz") @ Fv.values).ravel()[idx]
        K[n_int, :n_int] = crow
        return K

    def extended_step(Fv, dv):
        """One gauge-extended Newton step; returns updated point and the
        locked defect tau (the unfolding coordinate)."""
        from scipy.linalg import lu_factor as _lf, lu_solve as _ls

        res_v, gc, _, stream_v = residual_at(Fv, dv)
        K = build_K(Fv, dv, stream_v)
        luK = _lf(K)
        v = np.random.default_rng(0).normal(size=n_int + 1)
        for _ in range(8):
            u = _ls(luK, v, trans=1)
            u /= np.linalg.norm(u)
            v = _ls(luK, u, trans=0)
            v /= np.linalg.norm(v)
        u = K @ v
        u /= np.linalg.norm(u)
        K3 = np.zeros((n_int + 2, n_int + 2))
        K3[: n_int + 1, : n_int + 1] = K
        K3[: n_int + 1, n_int + 1] = u
        K3[n_int + 1, : n_int + 1] = v
        rhs3 = np.concatenate([-res_v[1:-1].ravel(), [-gc], [0.0]])
        sol = np.linalg.solve(K3, rhs3)
        dF = np.zeros((g.nz, g.ntheta))
        dF[1:-1] = sol[:n_int].reshape(g.nz - 2, g.ntheta)
        return Fv.with_values(Fv.values + dF), dv + sol[n_int], sol[n_int + 1]

    def tau_at_mu(F0, d0, mu, iters=2):
        Fm = _rescale_field(F0, mu, alpha)
        dm = d0
        tau = np.inf
        for _ in range(iters):
            Fm, dm, tau = extended_step(Fm, dm)
        return tau, Fm, dm

    res, gcon, res_norm, stream = residual_at(F, delta)
    best = (res_norm, F.copy(), delta, stream)
    if (g.nz - 2) * g.ntheta > 6500:
        raise ValueError(
            "profile Newton is dense-only at this size; solve on a coarser "
            "grid and prolong (see solve_profile_continued)"
        )
    lam_ladder = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0)

    for _ in range(max_iter):
        if res_norm <= tol:
            c = c_normalization(g, alpha)
            return Profile(F, delta, alpha, c, False, stream, float(res_norm))

        K = build_K(F, delta, stream)
        rhs = np.concatenate([-res[1:-1].ravel(), [-gcon]])
        G = gv = scale = None

        def lin_solve(lam):
            nonlocal G, gv, scale
            if lam == 0.0:
                return np.linalg.solve(K, rhs)
            if G is None:
                G = K.T @ K
                gv = K.T @ rhs
                scale = np.trace(G) / (n_int + 1)
            return np.linalg.solve(G + lam**2 * scale * np.eye(n_int + 1), gv)

        accepted = False
        for lam in lam_ladder:
            sol = lin_solve(lam)
            dF = np.zeros((g.nz, g.ntheta))
            dF[1:-1] = sol[:n_int].reshape(g.nz - 2, g.ntheta)
            step = 1.0
            for _ in range(12):
                try:
                    out = residual_at(
                        F.with_values(F.values + step * dF), delta + step * sol[n_int]
                    )
                except ValueError:
                    step *= 0.5
                    continue
                if out[2] < (1.0 - 1e-4 * step) * res_norm:
                    F = F.with_values(F.values + step * dF)
                    delta += step * sol[n_int]
                    res, gcon, res_norm, stream = out
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if res_norm < best[0]:
            best = (res_norm, F.copy(), delta, stream)
        if not accepted:
            break

    if res_norm <= tol:
        c = c_normalization(g, alpha)
        return Profile(F, delta, alpha, c, False, stream, float(res_norm))
    res_norm_b, Fb, db, streamb = best
    c = c_normalization(g, alpha)
    raise ProfileNonConvergence(
        f"Newton stalled at residual {res_norm_b:.3e} (tol {tol:.1e})",
        Profile(Fb, db, alpha, c, False, streamb, float(res_norm_b)),
    )


def _rescale_field(F: Field, mu: float, alpha: float) -> Field:
    """Exact mu-rescaling F(z) -> F(mu z) through the smooth cofactor."""
    from scipy.interpolate import RectBivariateSpline

    g = F.grid
    gam = gamma_theta(g.theta_nodes, alpha)
    spl = RectBivariateSpline(
        g.zeta_nodes, g.theta_nodes, F.values / gam[None, :], kx=3, ky=3
    )
    znew = mu * g.z_safe
    vals = spl(np.clip(znew / (1.0 + znew), 0.0, 1.0), g.theta_nodes) * gam[None, :]
    vals[0] = 0.0
    vals[-1] = 0.0
    return F.with_values(vals)


def solve_profile_continued(
    alpha: float,
    grid: Grid,
    tol: float = 1e-10,
    coarse_tol: float = 1e-6,
) -> Profile:
    """Grid-continuation Newton: solve on a coarse ladder and prolong.

    Plain Newton's basin along the discrete remnant of the mu-scaling
    family shrinks like sqrt(sigma_min) = O(h); starting from F* lies
    outside it on fine grids, while a prolonged coarse solution lands
    inside (distance O(h_coarse^2)).
    """
    from .grid import build_grid

    target = max(grid.nz, grid.ntheta)
    ladder = []
    n = 32
    while n < target:
        ladder.append(n)
        n = min(target, int(n * 1.5))
    prof = None
    for n in ladder:
        gl = build_grid(
            max(16, round(grid.nz * n / target)),
            max(16, round(grid.ntheta * n / target)),
            grid.stretch,
        )
        start = prolong_profile(prof, gl) if prof is not None else None
        try:
            prof = solve_profile(alpha, gl, tol=coarse_tol, start=start)
        except ProfileNonConvergence as err:
            prof = err.best  # prolongation quality is all the ladder needs
    start = prolong_profile(prof, grid) if prof is not None else None
    return solve_profile(alpha, grid, tol=tol, start=start)


def prolong_profile(prof: Profile, fine: Grid) -> Profile:
    """Interpolate a converged profile to a finer grid as a Newton start.

    Interpolation happens on the smooth cofactor F/Gamma (spline in the
    map coordinates), then the fine-grid Gamma factor is restored.
    """
    from scipy.interpolate import RectBivariateSpline

    gc = prof.F.grid
    alpha = prof.alpha
    gam_c = gamma_theta(gc.theta_nodes, alpha)
    G = prof.F.values / gam_c[None, :]
    # pad the theta axis with lattice-continuation ghost columns so the
    # finer midpoint nodes never trigger spline extrapolation
    h_c = gc.h_theta
    th_ext = np.concatenate(
        [[gc.theta_nodes[0] - h_c], gc.theta_nodes, [gc.theta_nodes[-1] + h_c]]
    )
    left = 3.0 * G[:, 0] - 3.0 * G[:, 1] + G[:, 2]
    right = 3.0 * G[:, -1] - 3.0 * G[:, -2] + G[:, -3]
    G_ext = np.hstack([left[:, None], G, right[:, None]])
    spl = RectBivariateSpline(gc.zeta_nodes, th_ext, G_ext, kx=3, ky=3)
    gam_f = gamma_theta(fine.theta_nodes, alpha)
    vals = spl(fine.zeta_nodes, fine.theta_nodes) * gam_f[None, :]
    vals[0, :] = 0.0
    vals[-1, :] = 0.0
    F = Field(fine, vals, "F")
    solver = StreamSolver(fine, alpha, backend="eig")
    stream = solver.solve(F, tol=np.inf)
    res = profile_residual(F, prof.delta, alpha, stream)
    return Profile(
        F=F,
        delta=prof.delta,
        alpha=alpha,
        c_norm=prof.c_norm,
        is_leading_order=False,
        stream=stream,
        residual=float(np.abs(res[1:-1]).max()),
    )


