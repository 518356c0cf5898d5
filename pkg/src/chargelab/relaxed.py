"""The relaxed problem (bottom charge in [-1, 1]) through its dual.

With v the physical potential (b = -grad v) the dual reads

    min_v  1/2 a(v, v) + sum_bottom w_i sigma(v_i) + sum_Gamma v_i F_i,

where F is the node-integrated outward Gamma flux, w the bottom dual facet
areas and sigma(v) = |v| for the box [-1, 1] (a general box [lo, hi] gives
sigma(v) = -lo v_+ + hi v_-).  Eliminating all non-bottom nodes leaves a
dense problem on the bottom with the Dirichlet-to-Neumann matrix S:

    min_x  1/2 x'Sx + r'x + sum w sigma(x),   r = F_B + K_BI v0,

and E_rel = E0 - min, with v0 the over-relaxed potential and E0 its energy.
At the optimum the bottom flux s = (Sx + r)/w lies in the box and equals
-sgn x where x != 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import splu

from .box import BoxGrid, FluxData, ScalarPotential, field_energy_box_values
from .domain import ChargeDensity, DomainSpec, total_energy
from .errors import (ConsistencyError, ConvergenceError, InfeasibleError,
                     InvalidInputError)

log = logging.getLogger(__name__)


@dataclass
class _Reduced:
    """Schur reduction of the box problem onto the bottom nodes."""

    grid: BoxGrid
    g: FluxData
    bottom: np.ndarray  # flat indices
    inner: np.ndarray
    lu: object
    S: np.ndarray
    r: np.ndarray
    w: np.ndarray
    v0: np.ndarray  # flat, zero on the bottom
    E0: float
    evals: np.ndarray
    evecs: np.ndarray

    @classmethod
    def build(cls, g: FluxData) -> "_Reduced":
        grid = g.grid
        K = grid.stiffness.tocsc()
        bmask = grid.bottom_mask.reshape(-1)
        B = np.flatnonzero(bmask)
        I = np.flatnonzero(~bmask)
        K_II = K[I][:, I].tocsc()
        K_IB = K[I][:, B].toarray()
        K_BB = K[B][:, B].toarray()
        lu = splu(K_II)
        X = lu.solve(K_IB)
        S = K_BB - K_IB.T @ X
        S = 0.5 * (S + S.T)
        F = g.nodal.reshape(-1)
        v0 = np.zeros(K.shape[0])
        v0[I] = -lu.solve(F[I])
        E0 = 0.5 * float(v0 @ (K @ v0))
        r = F[B] + K_IB.T @ v0[I]
        w = grid.bottom_weights.reshape(-1)
        evals, evecs = np.linalg.eigh(S)
        return cls(grid, g, B, I, lu, S, r, w, v0, E0, evals, evecs)

    @property
    def lipschitz(self) -> float:
        return float(self.evals[-1])

    def full(self, x: np.ndarray) -> np.ndarray:
        """Potential on the whole grid from its bottom values."""
        K = self.grid.stiffness
        v = self.v0.copy()
        v[self.bottom] = x
        # v_I = v0_I - K_II^{-1} K_IB x
        kib = (K[self.inner][:, self.bottom] @ x)
        v[self.inner] -= self.lu.solve(kib)
        return v

    def pinv_solve(self, rhs: np.ndarray) -> np.ndarray:
        keep = self.evals > 1e-12 * self.evals[-1]
        c = self.evecs.T @ rhs
        c[keep] /= self.evals[keep]
        c[~keep] = 0.0
        return self.evecs @ c

    def neumann_energy(self, s: np.ndarray) -> tuple:
        """Energy of the minimal field with bottom flux density s (nodal) and Gamma flux g."""
        # S x = -(F_B - w s + K_BI v0)
        rhs = -(self.r - self.w * s)
        x = self.pinv_solve(rhs)
        v = self.full(x)
        K = self.grid.stiffness
        return 0.5 * float(v @ (K @ v)), v


def _sigma(x, lo, hi):
    return np.where(x > 0, -lo * x, -hi * x)


def _prox(z, t, lo, hi):
    """prox of t * w * sigma, with the weights already folded into t."""
    a = t * (-lo)
    c = t * hi
    return np.where(z > a, z - a, np.where(z < -c, z + c, 0.0))


@dataclass
class DualState:
    domain: DomainSpec
    g: FluxData = field(repr=False)
    v: ScalarPotential = field(repr=False)
    dual_objective: float  # minimised value of the dual in our sign convention
    E_rel: float  # best estimate of the relaxed optimum
    E_rel_upper: float
    gap: float
    iterations: int
    converged: bool
    bottom_flux: np.ndarray = field(repr=False)  # recovered s, nodal
    bounds: tuple = (-1.0, 1.0)
    history: list = field(default_factory=list, repr=False)  # (iteration, objective, gap)
    E0: float = 0.0

    @property
    def E_rel_lower(self) -> float:
        return -self.dual_objective

    @property
    def relative_gap(self) -> float:
        return self.gap / max(abs(self.E_rel_upper), 1e-300) if self.gap > 0 else 0.0

    def write_checkpoint(self, path) -> None:
        with open(path, "w") as fh:
            for it, obj, gap in self.history:
                fh.write(f"{it} {obj!r} {gap!r}\n")


def read_checkpoint(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            it, obj, gap = line.split()
            out.append((int(it), float(obj), float(gap)))
    return out


def _shift_to_total(s: np.ndarray, w: np.ndarray, target: float, lo: float, hi: float) -> np.ndarray:
    """clip(s + tau) with tau chosen so that sum w clip(s + tau) = target."""
    def total(tau):
        return float(np.sum(w * np.clip(s + tau, lo, hi)))
    a, b = -(hi - lo) - np.max(np.abs(s)), (hi - lo) + np.max(np.abs(s))
    if total(a) > target or total(b) < target:
        raise InfeasibleError("flux outside the bottom capacity")
    for _ in range(200):
        m = 0.5 * (a + b)
        if total(m) < target:
            a = m
        else:
            b = m
    return np.clip(s + 0.5 * (a + b), lo, hi)


def dual_solve(g: FluxData, tol: float = 1e-4, max_iter: int = 200_000,
               bounds: tuple = (-1.0, 1.0), check_every: int = 25,
               x0: Optional[np.ndarray] = None) -> DualState:
    """Accelerated proximal gradient on the reduced dual, with restarts.

    The gap is certified: the recovered primal field is feasible and its
    energy is an upper bound, the dual value a lower bound.
    """
    lo, hi = map(float, bounds)
    if not (lo <= 0.0 <= hi):
        raise InvalidInputError("bounds must bracket zero")
    dom = g.domain
    G = g.total_flux
    cap_lo, cap_hi = lo * dom.bottom_area, hi * dom.bottom_area
    if G < cap_lo * (1 + 1e-12) - 1e-12 or G > cap_hi * (1 + 1e-12) + 1e-12:
        raise InfeasibleError(f"total flux {G:.6g} exceeds the bottom capacity")
    red = _Reduced.build(g)
    w = red.w
    S, r = red.S, red.r
    Lip = max(red.lipschitz, 1e-300)
    step = 1.0 / Lip

    def smooth(x):
        return 0.5 * x @ (S @ x) + r @ x

    def obj(x):
        return smooth(x) + float(np.sum(w * _sigma(x, lo, hi)))

    x = np.zeros_like(r) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = x.copy()
    theta = 1.0
    fx = obj(x)
    best_low = -np.inf
    best_up = np.inf
    best_s = None
    hist = []
    it = 0
    gap = np.inf
    converged = False
    if np.allclose(g.nodal, 0.0):
        best_low, best_up, best_s = 0.0, 0.0, np.zeros_like(r)
        converged, gap = True, 0.0
    while not converged and it < max_iter:
        it += 1
        grad = S @ y + r
        xn = _prox(y - step * grad, step * w, lo, hi)
        fn = obj(xn)
        if fn > fx:
            # restart momentum
            theta = 1.0
            y = x.copy()
            grad = S @ y + r
            xn = _prox(y - step * grad, step * w, lo, hi)
            fn = obj(xn)
        tn = 0.5 * (1 + np.sqrt(1 + 4 * theta * theta))
        y = xn + ((theta - 1) / tn) * (xn - x)
        x, fx, theta = xn, fn, tn
        if it % check_every == 0 or it == 1:
            low = red.E0 - fx
            s = (S @ x + r) / w
            s_feas = _shift_to_total(s, w, G, lo, hi)
            up, _ = red.neumann_energy(s_feas)
            if low > best_low:
                best_low = low
            if up < best_up:
                best_up, best_s = up, s_feas
            gap = max(best_up - best_low, 0.0)
            if best_low > best_up + 1e-9 * max(1.0, abs(best_up)):
                raise ConsistencyError(f"weak duality violated: {best_low} > {best_up}")
            hist.append((it, float(fx), float(gap)))
            if gap <= tol * max(abs(best_up), 1e-300) or gap <= 1e-14:
                converged = True
    if not converged:
        raise ConvergenceError("dual gap stagnated above tolerance", gap, it)
    v_full = red.full(x)
    pot = ScalarPotential(dom, v_full.reshape(red.grid.shape), (("bottom", "relaxed"), ("gamma", "flux")))
    return DualState(domain=dom, g=g, v=pot, dual_objective=float(-best_low),
                     E_rel=float(0.5 * (best_low + best_up)), E_rel_upper=float(best_up),
                     gap=float(gap), iterations=it, converged=True, bottom_flux=best_s,
                     bounds=(lo, hi), history=hist, E0=red.E0)


def primal_feasible_from_dual(state: DualState) -> tuple:
    """Clip-and-shift the recovered bottom flux and solve for the minimal field.

    Returns (DiscreteField, energy upper bound).
    """
    g = state.g
    red = _Reduced.build(g)
    lo, hi = state.bounds
    s = state.bottom_flux
    s = _shift_to_total(np.clip(s, lo, hi), red.w, g.total_flux, lo, hi)
    E, v = red.neumann_energy(s)
    pot = ScalarPotential(state.domain, v.reshape(red.grid.shape))
    return pot.field(), E


def kkt_violation(state: DualState, tol: float = 1e-6) -> float:
    """Largest violation of |s| <= 1 where v = 0 and s = -sgn v where v != 0."""
    red = _Reduced.build(state.g)
    x = state.v.values.reshape(-1)[red.bottom]
    s = (red.S @ x + red.r) / red.w
    lo, hi = state.bounds
    out = np.maximum(s - hi, lo - s)
    pos = x > tol
    neg = x < -tol
    out = np.where(pos, np.abs(s - lo), out)
    out = np.where(neg, np.abs(s - hi), out)
    return float(np.max(out, initial=0.0))


# --- rounding -------------------------------------------------------------

def rounding_cell(l: float, h: float) -> float:
    """Divisor of l in [1, 2] closest to 1.5 with lambda/h an integer (ties: larger)."""
    best = None
    kmax = int(np.floor(l)) + 1
    for k in range(1, kmax + 1):
        lam = l / k
        if lam < 1 - 1e-12 or lam > 2 + 1e-12:
            continue
        m = lam / h
        if abs(m - round(m)) > 1e-9:
            continue
        key = (abs(lam - 1.5), -lam)
        if best is None or key < best[0]:
            best = (key, lam)
    if best is None:
        raise InvalidInputError(f"l = {l} admits no rounding cell in [1, 2] on this grid")
    return best[1]


def _fill_order(m: int, dims: int, flip: bool) -> np.ndarray:
    """Lexicographic order of the cells in a (m,)*dims block, first axis slowest."""
    idx = np.array(list(np.ndindex(*(m,) * dims)))
    if flip:
        idx[:, 0] = m - 1 - idx[:, 0]
    return idx


def round_to_binary(state: DualState) -> tuple:
    """Split each lambda-cell into a + box and a - box carrying the cell's relaxed charge.

    Counts are distributed by error diffusion over the cells (serpentine order),
    then the field is the minimal one for the rounded charge and data g, which
    is at most the relaxed field plus the per-cell building blocks.
    """
    dom = state.domain
    g = state.g
    d = dom.d
    h = dom.h
    lam = rounding_cell(dom.L, h)
    m = int(round(lam / h))
    k = dom.N // m
    dims = d - 1
    lo, hi = state.bounds
    # cell-centred relaxed charge from the nodal flux
    s_nodal = state.bottom_flux.reshape((dom.N + 1,) * dims)
    sbar = np.zeros(dom.bottom_shape)
    for corner in np.ndindex(*(2,) * dims):
        sl = tuple(slice(c, c + dom.N) for c in corner)
        sbar += s_nodal[sl]
    sbar /= 2 ** dims
    n_sub = m ** dims
    G = g.total_flux
    total_plus = (G / dom.cell_area + dom.n_cells) / 2.0
    if abs(total_plus - round(total_plus)) > 1e-6:
        raise InfeasibleError("total flux is not representable by a +-1 pattern on this grid")
    blocks = sbar.reshape(sum(((k, m) for _ in range(dims)), ()))
    axes = tuple(2 * i + 1 for i in range(dims))
    q = blocks.sum(axis=axes) * dom.cell_area  # charge per lambda-cell
    cap = lam ** dims
    if np.any(np.abs(q) > cap * (1 + 1e-9)):
        raise ConsistencyError("relaxed cell flux outside the cell capacity")
    targets = (q / dom.cell_area + n_sub) / 2.0
    # serpentine order over lambda-cells
    order = []
    for idx in np.ndindex(*(k,) * dims):
        order.append(idx)
    if dims == 2:
        order = [(i, j if i % 2 == 0 else k - 1 - j) for i, j in order]
    cum = 0.0
    prev = 0
    u = -np.ones(dom.bottom_shape, dtype=int)
    for c in order:
        cum += targets[c]
        n_plus = int(round(cum)) - prev
        prev += n_plus
        n_plus = min(max(n_plus, 0), n_sub)
        flip = (sum(c) % 2) == 1
        cells = _fill_order(m, dims, flip)[:n_plus]
        base = np.array(c) * m
        for off in cells:
            u[tuple(base + off)] = 1
    if prev != int(round(total_plus)):
        raise ConsistencyError("error diffusion lost charge")
    ucd = ChargeDensity(dom.with_bc("flux"), u)
    pot, Ef = field_energy_box_values(ucd.domain, ucd.as_float(), "flux", g)
    br = total_energy(ucd, Ef)
    return ucd, pot.field(), br
