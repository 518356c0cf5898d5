"""Mixed-boundary Laplace solves on the box and the elliptic inequality checkers.

Discretization: nodal unknowns on the (N+1)^{d-1} x (M+1) box lattice and the
second-order (5- or 7-point) stencil.  Every node owns a dual cell; along
each axis the dual cell has width h_a, halved at the two end nodes.  An edge
from node i to i + e_a carries a field component b_e, its dual facet has area
A_e (product of the dual widths of the other axes), and the discrete energy is

    1/2 sum_e A_e h_a b_e^2.

Node balance: the outflow sum_a (A b)_{e+} - (A b)_{e-} plus the outward
boundary flux F_i through the part of the dual cell on the box boundary
must vanish.  For b = -grad v this is K v = -F with K the weighted graph
Laplacian; Neumann faces enter through F (the ghost-node treatment) and
Dirichlet faces are eliminated.  Energies are evaluated edge by edge, which
is the midpoint rule for the piecewise-linear-in-each-axis potential.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import LinearOperator, cg

from .domain import ChargeDensity, DomainSpec
from .errors import (ConvergenceError, InfeasibleError, InvalidInputError,
                     PreconditionError)

log = logging.getLogger(__name__)

CG_RTOL = 1e-10
CG_MAXITER = 100_000


# --- grid ----------------------------------------------------------------

@dataclass(frozen=True)
class BoxGrid:
    domain: DomainSpec

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def shape(self) -> tuple:
        dom = self.domain
        return (dom.N + 1,) * (dom.d - 1) + (dom.M + 1,)

    @property
    def spacing(self) -> tuple:
        dom = self.domain
        return (dom.h,) * (dom.d - 1) + (dom.hz,)

    def coords(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        if axis == self.d - 1:
            return np.linspace(0.0, self.domain.L, n)
        return np.linspace(-0.5 * self.domain.L, 0.5 * self.domain.L, n)

    def points(self) -> np.ndarray:
        """Node coordinates, shape grid + (d,)."""
        mesh = np.meshgrid(*[self.coords(a) for a in range(self.d)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def axis_weights(self, axis: int) -> np.ndarray:
        w = np.full(self.shape[axis], self.spacing[axis])
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def _outer(self, arrays) -> np.ndarray:
        out = np.ones(())
        for a in arrays:
            out = np.multiply.outer(out, a)
        return out

    @cached_property
    def node_volume(self) -> np.ndarray:
        return self._outer([self.axis_weights(a) for a in range(self.d)])

    def edge_area(self, axis: int) -> np.ndarray:
        """Dual facet areas of the edges along `axis` (broadcastable)."""
        parts = []
        for b in range(self.d):
            if b == axis:
                parts.append(np.ones(self.shape[b] - 1))
            else:
                parts.append(self.axis_weights(b))
        return self._outer(parts)

    def face_area(self, axis: int) -> np.ndarray:
        """Dual facet areas on a face normal to `axis` (array over that face)."""
        return self._outer([self.axis_weights(b) for b in range(self.d) if b != axis])

    # masks
    @cached_property
    def bottom_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[..., 0] = True
        return m

    @cached_property
    def lateral_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for a in range(self.d - 1):
            idx = [slice(None)] * self.d
            idx[a] = 0
            m[tuple(idx)] = True
            idx[a] = -1
            m[tuple(idx)] = True
        return m

    @cached_property
    def top_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[..., -1] = True
        return m

    @cached_property
    def gamma_mask(self) -> np.ndarray:
        """Nodes on the lateral or top faces (bottom edges included)."""
        return self.lateral_mask | self.top_mask

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~(self.gamma_mask | self.bottom_mask)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        mats = None
        for a in range(self.d):
            n = self.shape[a]
            D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
            k1 = (D.T @ D) / self.spacing[a]
            term = None
            for b in range(self.d):
                f = k1 if b == a else sp.diags(self.axis_weights(b))
                term = f if term is None else sp.kron(term, f)
            mats = term if mats is None else mats + term
        return sp.csr_matrix(mats)

    # operators
    def gradient(self, v: np.ndarray) -> tuple:
        return tuple(np.diff(v, axis=a) / self.spacing[a] for a in range(self.d))

    def node_balance(self, comps) -> np.ndarray:
        """Outflow through interior dual facets at every node."""
        out = np.zeros(self.shape)
        for a, b in enumerate(comps):
            q = self.edge_area(a) * b
            lo = [slice(None)] * self.d
            hi = [slice(None)] * self.d
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            out[tuple(lo)] += q
            out[tuple(hi)] -= q
        return out

    def dirichlet_form(self, v: np.ndarray) -> float:
        """sum_e A_e h_a (grad v)^2, i.e. the integral of |grad v|^2."""
        return float(sum(np.sum(self.edge_area(a) * self.spacing[a] * g * g)
                         for a, g in enumerate(self.gradient(v))))

    def bottom_flux(self, cell_values: np.ndarray) -> np.ndarray:
        """Nodal outward bottom flux of a cell-centred normal field b.e_d = q.

        Each cell gives an equal share to its 2^{d-1} corner nodes.
        """
        dom = self.domain
        q = np.asarray(cell_values, dtype=float)
        if q.shape != dom.bottom_shape:
            raise InvalidInputError(f"bottom data shape {q.shape} != {dom.bottom_shape}")
        pad = np.pad(q, 1)
        acc = np.zeros((dom.N + 1,) * (dom.d - 1))
        for corner in np.ndindex(*(2,) * (dom.d - 1)):
            sl = tuple(slice(c, c + dom.N + 1) for c in corner)
            acc += pad[sl]
        out = np.zeros(self.shape)
        out[..., 0] = -acc * dom.cell_area / 2 ** (dom.d - 1)
        return out

    @cached_property
    def bottom_weights(self) -> np.ndarray:
        """Bottom dual facet areas, shape (N+1)^{d-1}."""
        return self.face_area(self.d - 1)


# --- data types -----------------------------------------------------------

@dataclass(frozen=True)
class FluxData:
    """Outward normal flux g on Gamma (lateral and top faces).

    Stored node-integrated: nodal[i] is the flux through the part of node
    i's dual cell on Gamma.
    """

    domain: DomainSpec
    nodal: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.nodal, dtype=float)
        grid = BoxGrid(self.domain)
        if a.shape != grid.shape:
            raise InvalidInputError(f"flux array shape {a.shape} != {grid.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("flux data must be finite")
        if np.any(a[~grid.gamma_mask] != 0):
            raise InvalidInputError("flux data must vanish off Gamma")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "nodal", a)

    @property
    def total_flux(self) -> float:
        return float(self.nodal.sum())

    @property
    def grid(self) -> BoxGrid:
        return BoxGrid(self.domain)

    def scaled(self, t: float) -> "FluxData":
        return FluxData(self.domain, t * self.nodal)

    @classmethod
    def zero(cls, domain: DomainSpec) -> "FluxData":
        return cls(domain, np.zeros(BoxGrid(domain).shape))

    @classmethod
    def face_names(cls, d: int) -> list:
        names = []
        for a in range(d - 1):
            names += [f"x{a}-", f"x{a}+"]
        return names + ["top"]

    @classmethod
    def from_faces(cls, domain: DomainSpec, faces: dict) -> "FluxData":
        """Faces map names (x0-, x0+, ..., top) to nodal densities on that face."""
        grid = BoxGrid(domain)
        d = domain.d
        out = np.zeros(grid.shape)
        for name, dens in faces.items():
            if name == "top":
                axis, end = d - 1, -1
            else:
                try:
                    axis = int(name[1:-1])
                    end = {"-": 0, "+": -1}[name[-1]]
                except (ValueError, KeyError):
                    raise InvalidInputError(f"unknown face {name!r}") from None
                if not 0 <= axis < d - 1:
                    raise InvalidInputError(f"unknown face {name!r}")
            dens = np.asarray(dens, dtype=float)
            area = grid.face_area(axis)
            if dens.shape != area.shape:
                raise InvalidInputError(f"face {name}: shape {dens.shape} != {area.shape}")
            idx = [slice(None)] * d
            idx[axis] = end
            out[tuple(idx)] += dens * area
        return cls(domain, out)

    @classmethod
    def from_function(cls, domain: DomainSpec, fn: Callable) -> "FluxData":
        """fn(points, normal) -> density, with points of shape face + (d,)."""
        grid = BoxGrid(domain)
        pts = grid.points()
        d = domain.d
        faces = {}
        for name in cls.face_names(d):
            if name == "top":
                axis, end, sign = d - 1, -1, 1.0
            else:
                axis = int(name[1:-1])
                end, sign = (0, -1.0) if name[-1] == "-" else (-1, 1.0)
            idx = [slice(None)] * d
            idx[axis] = end
            normal = np.zeros(d)
            normal[axis] = sign
            faces[name] = np.broadcast_to(fn(pts[tuple(idx)], normal), grid.face_area(axis).shape)
        return cls.from_faces(domain, faces)

    @classmethod
    def from_field(cls, b: "DiscreteField") -> "FluxData":
        """Gamma flux implied by node balance, at Gamma nodes off the bottom face."""
        grid = b.grid
        mask = grid.gamma_mask & ~grid.bottom_mask
        out = np.where(mask, -grid.node_balance(b.comps), 0.0)
        return cls(b.domain, out)


@dataclass(frozen=True)
class DiscreteField:
    domain: DomainSpec
    comps: tuple = field(repr=False)

    @property
    def grid(self) -> BoxGrid:
        return BoxGrid(self.domain)

    def energy(self) -> float:
        g = self.grid
        return 0.5 * float(sum(np.sum(g.edge_area(a) * g.spacing[a] * c * c)
                               for a, c in enumerate(self.comps)))

    def node_balance(self) -> np.ndarray:
        return self.grid.node_balance(self.comps)

    def interior_divergence(self) -> float:
        g = self.grid
        bal = self.node_balance()
        return float(np.max(np.abs(bal / g.node_volume)[g.interior_mask], initial=0.0))

    def bottom_normal(self) -> np.ndarray:
        """Nodal bottom flux density b.e_d implied by balance at bottom nodes off Gamma."""
        g = self.grid
        bal = self.node_balance()[..., 0]
        return bal / g.bottom_weights

    def __add__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.domain, tuple(a + b for a, b in zip(self.comps, other.comps)))

    def __sub__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.domain, tuple(a - b for a, b in zip(self.comps, other.comps)))

    def scaled(self, t: float) -> "DiscreteField":
        return DiscreteField(self.domain, tuple(t * c for c in self.comps))

    @classmethod
    def from_stream(cls, domain: DomainSpec, psi: Callable) -> "DiscreteField":
        """Divergence-free d=2 field b = (-d_z psi, d_x psi) from facet differences.

        psi is sampled at cell centres and at the boundary points where dual
        facets meet the box boundary, so every dual cell (boundary ones too)
        balances exactly and facet fluxes are exact integrals of b.n.
        """
        if domain.d != 2:
            raise InvalidInputError("stream functions are for d = 2")
        grid = BoxGrid(domain)
        xs = grid.coords(0)
        zs = grid.coords(1)
        xd = np.concatenate([[xs[0]], 0.5 * (xs[1:] + xs[:-1]), [xs[-1]]])
        zd = np.concatenate([[zs[0]], 0.5 * (zs[1:] + zs[:-1]), [zs[-1]]])
        X, Z = np.meshgrid(xd, zd, indexing="ij")
        P = psi(X, Z) if callable(psi) else np.asarray(psi, dtype=float)
        if P.shape != (len(xd), len(zd)):
            raise InvalidInputError(f"stream samples need shape {(len(xd), len(zd))}")
        # x-edge (i,j)-(i+1,j): facet at x = xd[i+1] from zd[j] to zd[j+1]
        fx = -(P[1:-1, 1:] - P[1:-1, :-1])
        # z-edge (i,j)-(i,j+1): facet at z = zd[j+1] from xd[i] to xd[i+1]
        fz = P[1:, 1:-1] - P[:-1, 1:-1]
        bx = fx / grid.edge_area(0)
        bz = fz / grid.edge_area(1)
        return cls(domain, (bx, bz))

    @classmethod
    def random_divergence_free(cls, domain: DomainSpec, rng: np.random.Generator,
                               modes: int = 6) -> "DiscreteField":
        """Random smooth curl field (d = 2)."""
        L = domain.L
        c = rng.normal(size=(modes, modes)) / (1.0 + np.add.outer(np.arange(modes), np.arange(modes)))
        ph = rng.uniform(0, 2 * np.pi, size=(modes, modes))

        def psi(X, Z):
            out = np.zeros_like(X)
            for p in range(modes):
                for q in range(modes):
                    out += c[p, q] * np.cos(np.pi * p * (X / L + 0.5) + ph[p, q]) * np.cos(np.pi * q * Z / L + ph[q, p])
            return L * out

        return cls.from_stream(domain, psi)


@dataclass(frozen=True)
class SolveLog:
    iterations: int
    residual: float
    history: tuple = ()  # (iteration, residual, quadratic functional)


@dataclass(frozen=True)
class ScalarPotential:
    domain: DomainSpec
    values: np.ndarray = field(repr=False)
    tags: tuple = ()  # (face, condition) pairs
    solve: Optional[SolveLog] = field(default=None, compare=False)

    @property
    def grid(self) -> BoxGrid:
        return BoxGrid(self.domain)

    def field(self) -> DiscreteField:
        return DiscreteField(self.domain, tuple(-g for g in self.grid.gradient(self.values)))

    def energy(self) -> float:
        return 0.5 * self.grid.dirichlet_form(self.values)

    def to_csv(self, path) -> None:
        pts = self.grid.points().reshape(-1, self.domain.d)
        data = np.column_stack([pts, self.values.reshape(-1)])
        head = ",".join([f"x{a}" for a in range(self.domain.d)] + ["v"])
        np.savetxt(path, data, delimiter=",", header=head, comments="", fmt="%.17g")


# --- linear solves --------------------------------------------------------

def solve_potential(grid: BoxGrid, F: np.ndarray, dirichlet: Optional[np.ndarray] = None,
                    rtol: float = CG_RTOL, maxiter: int = CG_MAXITER,
                    record: bool = False, x0: Optional[np.ndarray] = None) -> tuple:
    """Solve K v = -F with v = 0 on `dirichlet` nodes; returns (v, SolveLog).

    Without Dirichlet nodes the system is pure Neumann: F must sum to zero,
    and the solution is pinned to zero (volume-weighted) mean.
    """
    K = grid.stiffness
    shape = grid.shape
    F = np.asarray(F, dtype=float)
    if dirichlet is None or not dirichlet.any():
        free = np.ones(np.prod(shape), dtype=bool)
        neumann = True
    else:
        free = ~dirichlet.reshape(-1)
        neumann = False
    A = K[free][:, free] if not neumann else K
    rhs = -F.reshape(-1)[free]
    scale = float(np.abs(rhs).sum())
    if neumann:
        if abs(rhs.sum()) > 1e-9 * max(scale, 1e-300) and abs(rhs.sum()) > 1e-13:
            raise InfeasibleError(
                f"pure Neumann data must balance (net flux {rhs.sum():.3e})")
        rhs = rhs - rhs.mean()
    v = np.zeros(np.prod(shape))
    if scale == 0.0:
        return v.reshape(shape), SolveLog(0, 0.0, ())
    diag = A.diagonal()
    Minv = LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
    hist = []
    count = [0]

    def cb(xk):
        count[0] += 1
        if record:
            r = rhs - A @ xk
            f = 0.5 * xk @ (A @ xk) - rhs @ xk
            hist.append((count[0], float(np.linalg.norm(r)), float(f)))

    start = None if x0 is None else x0.reshape(-1)[free]
    x, info = cg(A, rhs, x0=start, rtol=rtol, atol=0.0, maxiter=maxiter, M=Minv, callback=cb)
    res = float(np.linalg.norm(rhs - A @ x))
    if info != 0 or res > 10 * rtol * np.linalg.norm(rhs):
        raise ConvergenceError("conjugate gradient did not converge", res / np.linalg.norm(rhs), count[0])
    v[free] = x
    v = v.reshape(shape)
    if neumann:
        v -= np.sum(v * grid.node_volume) / np.sum(grid.node_volume)
    log.debug("cg iterations=%d residual=%.3e", count[0], res)
    return v, SolveLog(count[0], res / np.linalg.norm(rhs), tuple(hist))


# --- operations -----------------------------------------------------------

def overrelaxed_solve(g: FluxData, record: bool = False) -> tuple:
    """v0 harmonic, -d_nu v0 = g on Gamma, v0 = 0 on the bottom; returns (v0, energy)."""
    grid = g.grid
    v, info = solve_potential(grid, g.nodal, dirichlet=grid.bottom_mask, record=record)
    pot = ScalarPotential(g.domain, v, (("bottom", "dirichlet"), ("gamma", "flux")), info)
    return pot, pot.energy()


def field_energy_box_values(domain: DomainSpec, bottom: np.ndarray, mode: str,
                            g: Optional[FluxData] = None, record: bool = False) -> tuple:
    """Minimal field energy for cell-centred bottom normal data b.e_d = bottom."""
    grid = BoxGrid(domain)
    F = grid.bottom_flux(bottom)
    charge = float(np.sum(bottom)) * domain.cell_area
    if mode == "free":
        v, info = solve_potential(grid, F, dirichlet=grid.gamma_mask, record=record)
        tags = (("bottom", "flux"), ("gamma", "dirichlet"))
    elif mode in ("zero_flux", "flux"):
        if mode == "flux":
            if g is None:
                raise InvalidInputError("flux mode needs boundary data g")
            if g.domain.L != domain.L or g.grid.shape != grid.shape:
                raise InvalidInputError("flux data lives on a different grid")
            F = F + g.nodal
            target = g.total_flux
        else:
            target = 0.0
        if abs(charge - target) > 1e-9 * max(1.0, domain.bottom_area):
            raise InfeasibleError(
                f"{mode}: bottom charge {charge:.6g} does not balance boundary flux {target:.6g}")
        v, info = solve_potential(grid, F, dirichlet=None, record=record)
        tags = (("bottom", "flux"), ("gamma", "flux"))
    else:
        raise InvalidInputError(f"unknown box mode {mode!r}")
    pot = ScalarPotential(domain, v, tags, info)
    return pot, pot.energy()


def field_energy_box(u: ChargeDensity, mode: str, g: Optional[FluxData] = None,
                     record: bool = False) -> tuple:
    return field_energy_box_values(u.domain, u.as_float(), mode, g, record)


def harmonic_building_block(bottom_data: np.ndarray, cell: DomainSpec) -> tuple:
    """All-Neumann solve with b.e_d = bottom_data below and zero flux on Gamma."""
    data = np.asarray(bottom_data, dtype=float)
    scale = float(np.abs(data).sum())
    if abs(float(data.sum())) > 1e-10 * max(scale, 1.0):
        raise InfeasibleError("building block data must have zero mean")
    grid = BoxGrid(cell)
    v, info = solve_potential(grid, grid.bottom_flux(data), dirichlet=None)
    pot = ScalarPotential(cell, v, (("bottom", "flux"), ("gamma", "zero_flux")), info)
    return pot, pot.energy()


def building_block_bound(bottom_data: np.ndarray, cell: DomainSpec, p: float) -> float:
    """lambda^{d-(d-1)2/p} (int |g|^p)^{2/p}, without the constant."""
    d = cell.d
    lam = cell.L
    integral = float(np.sum(np.abs(bottom_data) ** p)) * cell.cell_area
    return lam ** (d - (d - 1) * 2.0 / p) * integral ** (2.0 / p)


def orthogonality_residual(b: DiscreteField, v0: Optional[ScalarPotential] = None,
                           div_tol: float = 1e-8) -> float:
    """|int 1/2|b + grad v0|^2 - (int 1/2|b|^2 - int 1/2|grad v0|^2)| / (1 + int 1/2|b|^2)."""
    scale = 1.0 + max(float(np.max(np.abs(c))) for c in b.comps) / min(b.grid.spacing)
    div = b.interior_divergence()
    if div > div_tol * scale:
        raise PreconditionError(f"field is not divergence free (max |div b| = {div:.3e})")
    if v0 is None:
        v0, _ = overrelaxed_solve(FluxData.from_field(b))
    grad = v0.grid.gradient(v0.values)
    eb = b.energy()
    mixed = DiscreteField(b.domain, tuple(c + g for c, g in zip(b.comps, grad))).energy()
    return abs(mixed - (eb - v0.energy())) / (1.0 + eb)


# --- normal flux estimate (closed form on the cube (0, pi)^d) -------------

@dataclass(frozen=True)
class FluxModes:
    """Harmonic function on (0,pi)^d given by a finite mode set.

    case "easy": v = sum a_n prod_i cos(n_i x_i) sinh(|n| x_d), vanishing at x_d = 0;
    case "hard": v = sum a_n sin((n_1+1/2) x_1) prod_{i>1} cos(n_i x_i) cosh(alpha_n x_d),
        vanishing on x_1 = 0 (the output face), input on the top.
    amplitudes c_n are normalised by the top flux: a_n = c_n / (k_n q_n(pi)),
    q = cosh (easy) or sinh (hard), k_n = |n| or alpha_n.
    """

    case: str
    d: int
    indices: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        idx = np.atleast_2d(np.asarray(self.indices, dtype=int))
        amp = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        if self.case not in ("easy", "hard"):
            raise InvalidInputError(f"unknown case {self.case!r}")
        if idx.size == 0 or amp.size == 0 or idx.shape[0] != amp.size or idx.shape[1] != self.d - 1:
            raise InvalidInputError("mode set must be nonempty with one index row per amplitude")
        if np.any(idx < 0):
            raise InvalidInputError("mode indices must be nonnegative")
        if self.case == "easy" and np.any(idx.sum(axis=1) == 0):
            raise InvalidInputError("the zero mode vanishes identically in the easy case")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "amplitudes", amp)

    def wavenumbers(self) -> np.ndarray:
        n = self.indices.astype(float)
        if self.case == "hard":
            n[:, 0] += 0.5
        return np.sqrt(np.sum(n * n, axis=1))


def _cos_norm(n: np.ndarray) -> np.ndarray:
    """int_0^pi cos^2(n x) for each entry, multiplied along the last axis."""
    return np.prod(np.where(n == 0, np.pi, 0.5 * np.pi), axis=-1) if n.shape[-1] else np.ones(n.shape[0])


def _scaled_cosh_overlap(a, b) -> np.ndarray:
    """exp(-pi(a+b)) int_0^pi cosh(a x) cosh(b x) dx."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = a + b
    first = (1.0 - np.exp(-2 * np.pi * s)) / (2.0 * s)
    diff = a - b
    with np.errstate(divide="ignore", invalid="ignore"):
        second = np.where(np.abs(diff) > 1e-12,
                          (np.exp(-2 * np.pi * b) - np.exp(-2 * np.pi * a)) / (2.0 * np.where(diff == 0, 1, diff)),
                          np.pi * np.exp(-2 * np.pi * a))
    return 0.5 * (first + second)


def normal_flux_parts(modes: FluxModes) -> tuple:
    """(int over output face of (d_nu v)^2, int over the rest of the boundary)."""
    c = modes.amplitudes
    k = modes.wavenumbers()
    if modes.case == "easy":
        # a_n = c_n/(|n| cosh(pi |n|)); d_z v = sum a |n| cos.. cosh(|n| z)
        w = _cos_norm(modes.indices)
        bottom = np.sum(c * c * w / np.cosh(np.pi * k) ** 2)
        top = np.sum(c * c * w)
        return float(bottom), float(top)
    # hard case
    rest = modes.indices[:, 1:]
    w_rest = _cos_norm(rest)
    top = float(np.sum(c * c * w_rest) * 0.5 * np.pi)
    sh = 0.5 * (1.0 - np.exp(-2 * np.pi * k))  # sinh(pi k) exp(-pi k)
    left = 0.0
    keys = [tuple(r) for r in rest]
    groups = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    for key, ids in groups.items():
        ids = np.array(ids)
        n1 = modes.indices[ids, 0] + 0.5
        coef = c[ids] * n1 / (k[ids] * sh[ids])
        ov = _scaled_cosh_overlap(k[ids][:, None], k[ids][None, :])
        left += float(w_rest[ids[0]] * coef @ ov @ coef)
    return left, top


def normal_flux_forms(modes: FluxModes) -> tuple:
    """Matrices (A, B) with normal_flux_parts = (c'Ac, c'Bc) for amplitudes c."""
    k = modes.wavenumbers()
    n = len(k)
    if modes.case == "easy":
        w = _cos_norm(modes.indices)
        return np.diag(w / np.cosh(np.pi * k) ** 2), np.diag(w)
    rest = modes.indices[:, 1:]
    w_rest = _cos_norm(rest)
    B = np.diag(w_rest * 0.5 * np.pi)
    f = (modes.indices[:, 0] + 0.5) / (k * 0.5 * (1.0 - np.exp(-2 * np.pi * k)))
    same = np.all(rest[:, None, :] == rest[None, :, :], axis=-1) if rest.shape[1] else np.ones((n, n), bool)
    A = np.where(same, w_rest[:, None] * np.outer(f, f) * _scaled_cosh_overlap(k[:, None], k[None, :]), 0.0)
    return A, B


def normal_flux_worst(modes: FluxModes) -> float:
    """Largest ratio over all amplitudes on the given index set (top generalized eigenvalue)."""
    A, B = normal_flux_forms(modes)
    return float(eigh(A, B, eigvals_only=True)[-1])


def normal_flux_check(modes: FluxModes, verify: bool = False) -> float:
    """Ratio of the output-face flux norm to the Gamma flux norm."""
    out, rest = normal_flux_parts(modes)
    if rest <= 0.0:
        raise InvalidInputError("all-zero mode coefficients give 0/0")
    if verify and modes.case == "hard":
        k = modes.wavenumbers()
        x, wq = np.polynomial.legendre.leggauss(400)
        x = 0.5 * np.pi * (x + 1)
        wq = 0.5 * np.pi * wq
        for i in range(min(len(k), 6)):
            for j in range(min(len(k), 6)):
                num = np.sum(wq * np.cosh(k[i] * x) * np.cosh(k[j] * x)) * np.exp(-np.pi * (k[i] + k[j]))
                ref = _scaled_cosh_overlap(k[i], k[j])
                if abs(num - ref) > 1e-8 * abs(ref):
                    raise AssertionError(f"cross term mismatch {num} vs {ref}")
    return out / rest


def random_flux_modes(rng: np.random.Generator, d: int, cutoff: int, case: Optional[str] = None,
                      max_modes: int = 12) -> FluxModes:
    case = case or ("easy" if rng.random() < 0.5 else "hard")
    k = int(rng.integers(1, max_modes + 1))
    # log-uniform index magnitudes, so low modes are drawn equally often at every cutoff
    idx = np.floor(np.exp(rng.uniform(0.0, np.log(cutoff + 1.0), size=(k, d - 1)))).astype(int) - 1
    idx = np.clip(idx, 0, cutoff)
    if case == "easy":
        idx[idx.sum(axis=1) == 0, 0] = 1
    idx = np.unique(idx, axis=0)
    amp = rng.normal(size=len(idx))
    return FluxModes(case, d, idx, amp)


# --- Hardy inequality -----------------------------------------------------

def hardy_check(b) -> tuple:
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise InvalidInputError("sequence must be one-dimensional")
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise InvalidInputError("Hardy check needs finite nonnegative entries")
    s = np.cumsum(b)
    n = np.arange(1, len(b) + 1, dtype=float)
    lhs = float(np.sum((s / n) ** 2))
    rhs = float(np.sum(b * b))
    return lhs, rhs, (lhs / rhs if rhs > 0 else 0.0)


# --- trace estimate -------------------------------------------------------

def trace_terms(w: np.ndarray, domain: DomainSpec, eps: float) -> tuple:
    """(lhs, bracket) with lhs = ||w||_{L2(bottom)} and the bracket of the bound."""
    if not 0 < eps <= 1:
        raise InvalidInputError("eps must lie in (0, 1]")
    grid = BoxGrid(domain)
    wb = np.asarray(w, dtype=float)[..., 0]
    A = grid.bottom_weights
    lhs = float(np.sqrt(np.sum(A * wb * wb)))
    grad = float(np.sqrt(grid.dirichlet_form(w)))
    l1 = float(np.sum(A * np.abs(wb)))
    el = eps * domain.L
    bracket = np.sqrt(el) * grad + el ** (-(domain.d - 1) / 2.0) * l1
    return lhs, float(bracket)


def trace_check(w: np.ndarray, domain: DomainSpec, eps: float, C: float) -> tuple:
    lhs, bracket = trace_terms(w, domain, eps)
    rhs = C * bracket
    return lhs, rhs, rhs - lhs


def random_band_limited(domain: DomainSpec, rng: np.random.Generator, cutoff: int = 4) -> np.ndarray:
    """Random cosine polynomial on the box lattice with physical cutoff `cutoff`/L."""
    grid = BoxGrid(domain)
    L = domain.L
    d = domain.d
    axes = [grid.coords(a) for a in range(d)]
    w = np.zeros(grid.shape)
    n_terms = int(rng.integers(1, 6))
    for _ in range(n_terms):
        freq = rng.integers(0, cutoff + 1, size=d)
        ph = rng.uniform(0, 2 * np.pi, size=d)
        amp = rng.normal()
        f = np.ones(())
        for a in range(d):
            f = np.multiply.outer(f, np.cos(np.pi * freq[a] * (axes[a] - axes[a][0]) / L + ph[a]))
        w += amp * f
    return w
