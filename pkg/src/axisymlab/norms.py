"""Weighted Sobolev machinery.

H^k norm (measure dz dtheta, not r dr dtheta):

    |f|^2 = sum_{j=0..k}   |D_z^j f * w sin(2th)^{-eta/2}|_{L2}^2
          + sum_{i>=1, i+j<=k} |D_th^i D_z^j f * w sin(2th)^{-gamma/2}|_{L2}^2

with w(z) = (1+z)^2/z^2 by default (exponents configurable), eta = 99/100
and gamma = 1 + alpha/10. The z=0 node carries zero quadrature weight, so
the rule is finite exactly when the integrand is: perturbation roles vanish
quadratically at z = 0; profile-like fields are divergent there and show up
through the z->0 share diagnostic.

W^{l,infty} norm:

    sum_{k+j<=l} | (z+1)^k d_z^k (sin(2th)/(gamma-1+sin(2th)) d_th)^j f
                   * sin(2th)^{-alpha/5} |_{L^inf}

realized through the falling-factorial identity
(1+z)^k d_z^k = A (A-1) ... (A-k+1), A = (1+z) d_z, which stays regular on
the compactified grid.

Inner products are positive coefficient vectors over the same derivative
multi-index set; all coefficients equal to one reproduces the H^k norm, so
any positive vector gives a norm equivalent to it with m = min c, M = max c.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.sparse as sp

from .grid import Field, Grid

__all__ = [
    "NormParams",
    "InnerProduct",
    "hk_norm",
    "hk_norm_detailed",
    "wk_inf_norm",
    "energy",
    "EnergyBreakdown",
    "inequality_report",
    "multi_indices",
    "gram_matrix",
]


@dataclass(frozen=True)
class NormParams:
    k: int = 2
    alpha: float = 0.1
    eta: float = 99.0 / 100.0
    weight_pow: tuple = (2, 2)  # w(z) = (1+z)^a / z^b

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        if self.gamma - 1.0 <= 0:
            raise ValueError("gamma - 1 = alpha/10 must be positive")

    @property
    def gamma(self) -> float:
        return 1.0 + self.alpha / 10.0


def multi_indices(k: int) -> list[tuple[int, int]]:
    """(i, j) with i = #D_theta, j = #D_z; pure-radial slots first."""
    idx = [(0, j) for j in range(k + 1)]
    idx += [(i, j) for i in range(1, k + 1) for j in range(k - i + 1)]
    return idx


def _radial_weight_sq(grid: Grid, p: NormParams) -> np.ndarray:
    """w(z)^2 in zeta form; the z=0 node is set to 0 (zero quad weight)."""
    a, b = p.weight_pow
    zeta = grid.zeta_nodes
    w2 = np.zeros(grid.nz)
    w2[1:] = (1.0 - zeta[1:]) ** (2 * (b - a)) / zeta[1:] ** (2 * b)
    return w2


def _theta_weight_sq(grid: Grid, p: NormParams, mixed: bool) -> np.ndarray:
    expo = p.gamma if mixed else p.eta
    return grid.sin2t ** (-expo)


def _derivative_values(f: Field, i: int, j: int) -> np.ndarray:
    """D_theta^i D_z^j f as nodal values (D_z applied first)."""
    g = f.grid
    v = f.values
    Dz = g.op("Dz")
    for _ in range(j):
        v = Dz @ v
    if i:
        Dt = g.op("dtheta_dir") if f.role == "phi" else g.op("dtheta")
        for _ in range(i):
            v = (Dt @ v.T).T * g.sin2t[None, :]
    return v


def hk_norm(f: Field, p: NormParams) -> float:
    return hk_norm_detailed(f, p)["value"]


def hk_norm_detailed(f: Field, p: NormParams) -> dict:
    """H^k norm with the z->0 share diagnostic.

    'z0_share' is the contribution of the first tenth of the map coordinate;
    for admissible fields it is small and refinement-stable, for
    profile-like fields it grows under refinement (divergence flag).
    """
    g = f.grid
    w2 = _radial_weight_sq(g, p)
    rad_q = g.quad_z * w2
    rad_q[0] = 0.0
    n0 = max(2, g.nz // 10)
    total = 0.0
    head = 0.0
    for (i, j) in multi_indices(p.k):
        tw = _theta_weight_sq(g, p, mixed=i >= 1) * g.quad_theta
        v2 = _derivative_values(f, i, j) ** 2
        contrib = rad_q @ v2 @ tw
        total += contrib
        head += (rad_q[:n0] @ v2[:n0]) @ tw
    value = float(np.sqrt(total))
    share = float(head / total) if total > 0 else 0.0
    return {"value": value, "z0_share": share, "flagged": share > 0.5}


def wk_inf_norm(f: Field, l: int, p: NormParams) -> float:
    """Weighted L^inf norm with l derivatives."""
    g = f.grid
    A = g.op("one_plus_z_ddz")
    mol = g.sin2t / (p.gamma - 1.0 + g.sin2t)
    Dt = g.op("dtheta_dir") if f.role == "phi" else g.op("dtheta")
    wt = g.sin2t ** (-p.alpha / 5.0)

    total = 0.0
    v_ang = f.values
    for j in range(l + 1):
        v = v_ang
        for k in range(l - j + 1):
            total += np.abs(v * wt[None, :]).max()
            # next radial factor: (A - k I) turns (1+z)^k d^k into (1+z)^(k+1) d^(k+1)
            v = A @ v - k * v
        v_ang = (Dt @ v_ang.T).T * mol[None, :]
    return float(total)


@dataclass
class EnergyBreakdown:
    total: float
    eps_hk: float
    uphi_hk1: float
    dtheta_uphi_hk: float
    tan_uphi_hk: float
    flagged: bool = False


def energy(eps: Field, uphi: Field, p: NormParams) -> EnergyBreakdown:
    """|eps|_{H^k} + |U|_{H^{k+1}} + |dth U|_{H^k} + |tan(th) U|_{H^k}."""
    g = eps.grid
    d1 = hk_norm_detailed(eps, p)
    p1 = NormParams(k=p.k + 1, alpha=p.alpha, eta=p.eta, weight_pow=p.weight_pow)
    d2 = hk_norm_detailed(uphi, p1)
    dth = (g.op("dtheta") @ uphi.values.T).T
    d3 = hk_norm_detailed(Field(g, dth, "generic"), p)
    d4 = hk_norm_detailed(Field(g, uphi.values * g.tan_theta[None, :], "generic"), p)
    comps = (d1, d2, d3, d4)
    return EnergyBreakdown(
        total=sum(d["value"] for d in comps),
        eps_hk=d1["value"],
        uphi_hk1=d2["value"],
        dtheta_uphi_hk=d3["value"],
        tan_uphi_hk=d4["value"],
        flagged=any(d["flagged"] for d in comps),
    )


# -- inner products ----------------------------------------------------------


@dataclass
class InnerProduct:
    """Positive coefficients over the H^k multi-index set."""

    params: NormParams
    coeffs: dict = dfield(default_factory=dict)

    def __post_init__(self):
        full = {b: 1.0 for b in multi_indices(self.params.k)}
        full.update(self.coeffs)
        if any(c <= 0 for c in full.values()):
            raise ValueError("inner-product coefficients must be positive")
        self.coeffs = full

    def equivalence_constants(self) -> tuple[float, float]:
        vals = list(self.coeffs.values())
        return min(vals), max(vals)


def _slot_quadratures(grid: Grid, p: NormParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w2 = _radial_weight_sq(grid, p)
    rad_q = grid.quad_z * w2
    rad_q[0] = 0.0
    tw_pure = _theta_weight_sq(grid, p, mixed=False) * grid.quad_theta
    tw_mix = _theta_weight_sq(grid, p, mixed=True) * grid.quad_theta
    return rad_q, tw_pure, tw_mix


def gram_matrix(
    grid: Grid, ip: InnerProduct, interior: bool = False
) -> sp.csr_matrix:
    """Sparse Gram matrix of the inner product on flattened fields.

    With interior=True the matrix is restricted to radial nodes 1..nz-2
    (the admissible class has f(0,.) = f(inf,.) = 0 and those nodes carry
    zero quadrature weight, which would make the full Gram singular).
    """
    p = ip.params
    rad_q, tw_pure, tw_mix = _slot_quadratures(grid, p)
    Dz = grid.op("Dz")
    Dt = sp.diags(grid.sin2t) @ grid.op("dtheta")

    G = None
    Bz = sp.identity(grid.nz, format="csr")
    for j in range(p.k + 1):
        Bt = sp.identity(grid.ntheta, format="csr")
        for i in range(0, p.k - j + 1):
            c = ip.coeffs.get((i, j))
            if c is not None:
                tw = tw_pure if i == 0 else tw_mix
                B = sp.kron(Bz, Bt, format="csr")
                Q = sp.kron(sp.diags(rad_q), sp.diags(tw), format="csr")
                term = c * (B.T @ Q @ B)
                G = term if G is None else G + term
            Bt = Dt @ Bt
        Bz = Dz @ Bz
    G = G.tocsr()
    if interior:
        idx = interior_indices(grid)
        G = G[idx][:, idx].tocsr()
    return G


def interior_indices(grid: Grid) -> np.ndarray:
    """Flattened dof indices for radial nodes 1..nz-2 (all theta)."""
    iz = np.arange(1, grid.nz - 1)
    return (iz[:, None] * grid.ntheta + np.arange(grid.ntheta)[None, :]).ravel()


def inner_pairing(u: Field, v: Field, ip: InnerProduct) -> float:
    """((u, v)) for nodal fields under the coefficient inner product."""
    g = u.grid
    p = ip.params
    rad_q, tw_pure, tw_mix = _slot_quadratures(g, p)
    total = 0.0
    for (i, j), c in ip.coeffs.items():
        tw = tw_pure if i == 0 else tw_mix
        du = _derivative_values(u, i, j)
        dv = _derivative_values(v, i, j)
        total += c * (rad_q @ (du * dv) @ tw)
    return float(total)


# -- inequality spot checks ---------------------------------------------------


def _random_smooth(grid: Grid, rng: np.random.Generator) -> Field:
    """Smooth admissible sample: quadratic vanishing at z=0, decay, Dirichlet-
    compatible angular factors."""
    zeta = grid.zeta_nodes[:, None]
    th = grid.theta_nodes[None, :]
    radial = [
        zeta**2 * (1 - zeta) ** 2,
        zeta**2 * (1 - zeta) ** 3,
        zeta**3 * (1 - zeta) ** 2,
    ]
    angular = [np.sin(2 * th), np.sin(4 * th), np.sin(2 * th) ** 2]
    vals = np.zeros((grid.nz, grid.ntheta))
    for r in radial:
        for a in angular:
            vals += rng.normal() * r * a
    return Field(grid, vals, "eps")


def inequality_report(samples: int, p: NormParams, grid: Grid, seed: int = 0) -> dict:
    """Monte-Carlo ratios for the product rules, the separated sup embedding,
    and the transport pairings. All ratios are reported with the sqrt(gamma-1)
    loss factored in, so finiteness is the claim being checked."""
    if samples < 10:
        raise ValueError("need at least 10 samples")
    rng = np.random.default_rng(seed)
    root = np.sqrt(p.gamma - 1.0)
    ip = InnerProduct(params=p)

    prod, emb, t1, t2 = 0.0, 0.0, 0.0, 0.0
    g_weight = grid.sin2t ** (2.0 - p.gamma) * grid.quad_theta
    for _ in range(samples):
        f = _random_smooth(grid, rng)
        h = _random_smooth(grid, rng)
        nf, nh = hk_norm(f, p), hk_norm(h, p)
        if nf == 0 or nh == 0:
            continue
        fg = Field(grid, f.values * h.values, "eps")
        prod = max(prod, hk_norm(fg, p) * root / (nf * nh))

        dth = (grid.op("dtheta") @ h.values.T).T
        integral = (dth**2) @ g_weight
        sup2 = np.max(np.abs(h.values), axis=1) ** 2
        ok = integral > 1e-30
        if np.any(ok):
            emb = max(emb, float(np.max(sup2[ok] * root / integral[ok])))

        Dtg = (grid.op("dtheta") @ h.values.T).T * grid.sin2t[None, :]
        pair = inner_pairing(Field(grid, f.values * Dtg, "generic"), h, ip)
        t1 = max(t1, abs(pair) * root / (nf * nh**2))
        Dzg = grid.op("Dz") @ h.values
        pair2 = inner_pairing(Field(grid, f.values * Dzg, "generic"), h, ip)
        t2 = max(t2, abs(pair2) * root / (nf * nh**2))

    report = {
        "product_ratio": prod,
        "embedding_ratio": emb,
        "transport_theta_ratio": t1,
        "transport_z_ratio": t2,
    }
    report["all_finite"] = all(np.isfinite(v) for v in report.values())
    return report
