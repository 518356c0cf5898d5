"""Field energy and field reconstruction by per-mode harmonic extension.

For a bottom charge u on the torus of side L the potential in the slab of
height L with -d_z v = u at z = 0 and v = 0 at z = L is, mode by mode,

    v_k(z) = u_k sinh(|k|(L - z)) / (|k| cosh(|k| L)),   v_0(z) = u_0 (L - z).

The field energy is L^{d-1} sum_k M(k) |u_k|^2 with M(k) = tanh(|k|L)/(2|k|)
and M(0) = L/2.  u is read as the trigonometric interpolant of its cell
values.

The two box classes are handled by reflecting u across the lateral faces:
an even reflection gives zero lateral flux (and we then also use a zero-flux
top, multiplier coth), an odd reflection gives v = 0 on the lateral faces
(with v = 0 on top, multiplier tanh).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import ChargeDensity, DomainSpec
from .errors import DomainError, InfeasibleError, InvalidInputError, WrongClassError

MODES = ("periodic", "free", "zero_flux")


def wavenumbers(n: int, length: float, dims: int) -> tuple:
    """Per-axis wavevector components and |k| on an FFT grid."""
    k1 = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n) / length
    comps = np.meshgrid(*([k1] * dims), indexing="ij")
    kabs = np.sqrt(sum(c * c for c in comps))
    return comps, kabs


def multiplier(kabs: np.ndarray, height: float, top: str = "dirichlet") -> np.ndarray:
    """Per-mode energy weight M(k) for a slab of the given height.

    top = "dirichlet": tanh(|k|H)/(2|k|), with H/2 at k = 0.
    top = "neumann":   coth(|k|H)/(2|k|), with 0 at k = 0 (the mean must vanish).
    """
    kabs = np.asarray(kabs, dtype=float)
    out = np.zeros_like(kabs)
    nz = kabs > 0
    x = kabs[nz] * height
    if top == "dirichlet":
        out[nz] = np.tanh(x) / (2.0 * kabs[nz])
        out[~nz] = 0.5 * height
    elif top == "neumann":
        out[nz] = 1.0 / (np.tanh(x) * 2.0 * kabs[nz])
    else:
        raise InvalidInputError(f"unknown top condition {top!r}")
    return out


def _extend(values: np.ndarray, dims: int, parity: int) -> np.ndarray:
    """Reflect the trailing `dims` axes across the upper face with the given parity."""
    out = values
    for ax in range(-dims, 0):
        out = np.concatenate([out, parity * np.flip(out, axis=ax)], axis=ax)
    return out


@dataclass(frozen=True)
class SpectralKernel:
    """Multipliers M(k) on the DFT grid of the (possibly reflected) bottom torus."""

    domain: DomainSpec
    mode: str = "periodic"
    multipliers: np.ndarray = field(init=False, repr=False)
    kabs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown spectral mode {self.mode!r}")
        dom = self.domain
        dims = dom.d - 1
        if self.mode == "periodic":
            _, kabs = wavenumbers(dom.N, dom.L, dims)
            m = multiplier(kabs, dom.L, "dirichlet")
        else:
            _, kabs = wavenumbers(2 * dom.N, 2 * dom.L, dims)
            m = multiplier(kabs, dom.L, "neumann" if self.mode == "zero_flux" else "dirichlet")
        m.setflags(write=False)
        kabs.setflags(write=False)
        object.__setattr__(self, "multipliers", m)
        object.__setattr__(self, "kabs", kabs)

    @property
    def parity(self) -> int:
        return 1 if self.mode == "zero_flux" else -1

    def _lift(self, values: np.ndarray) -> np.ndarray:
        if self.mode == "periodic":
            return values
        return _extend(values, self.domain.d - 1, self.parity)

    def _axes(self) -> tuple:
        return tuple(range(-(self.domain.d - 1), 0))

    def energy(self, values: np.ndarray) -> float:
        dom = self.domain
        ext = self._lift(np.asarray(values, dtype=float))
        n = int(np.prod(ext.shape[-(dom.d - 1):]))
        uh = np.fft.fftn(ext, axes=self._axes()) / n
        if self.mode == "zero_flux" and abs(uh.flat[0]) > 1e-12:
            raise InfeasibleError("zero-flux field energy needs a charge with vanishing mean")
        # a reflected torus has 2^{d-1} times the area and the same energy density,
        # so the same formula gives the box energy
        return dom.L ** (dom.d - 1) * float(np.sum(self.multipliers * np.abs(uh) ** 2))

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Bottom potential phi = v(., 0); field energy = 1/2 h^{d-1} sum u phi."""
        dom = self.domain
        vals = np.asarray(values, dtype=float)
        ext = self._lift(vals)
        ax = self._axes()
        phi = np.fft.ifftn(2.0 * self.multipliers * np.fft.fftn(ext, axes=ax), axes=ax).real
        if self.mode == "periodic":
            return phi
        sl = (Ellipsis,) + tuple(slice(0, dom.N) for _ in range(dom.d - 1))
        return phi[sl]

    def matrix(self) -> np.ndarray:
        """Dense Green matrix G with phi = G @ u.ravel()."""
        dom = self.domain
        n = dom.n_cells
        if self.mode == "periodic":
            kern = np.fft.ifftn(2.0 * self.multipliers).real.ravel()
            idx = np.indices(dom.bottom_shape).reshape(dom.d - 1, -1)
            diff = (idx[:, :, None] - idx[:, None, :]) % dom.N
            flat = np.ravel_multi_index(tuple(diff), dom.bottom_shape)
            return kern[flat]
        eye = np.eye(n).reshape((n,) + dom.bottom_shape)
        cols = self.apply(eye).reshape(n, n)
        return 0.5 * (cols + cols.T).T


def _check_periodic(u: ChargeDensity):
    if u.domain.bc != "periodic":
        raise WrongClassError(f"spectral periodic evaluation needs bc=periodic, got {u.domain.bc}")


def field_energy_values(domain: DomainSpec, values: np.ndarray, mode: str = "periodic") -> float:
    """Field energy of an arbitrary real bottom density (bypasses the +-1 check)."""
    return SpectralKernel(domain, mode).energy(values)


def field_energy_periodic(u: ChargeDensity) -> float:
    _check_periodic(u)
    return SpectralKernel(u.domain).energy(u.as_float())


def field_energy_reflected(u: ChargeDensity, mode: str) -> float:
    """Box-class field energy (mode free or zero_flux) through lateral reflection."""
    if mode not in ("free", "zero_flux"):
        raise InvalidInputError(f"reflected evaluation supports free/zero_flux, got {mode!r}")
    return SpectralKernel(u.domain, mode).energy(u.as_float())


def green_apply(u: ChargeDensity) -> np.ndarray:
    _check_periodic(u)
    return SpectralKernel(u.domain).apply(u.as_float())


# --- field reconstruction ----------------------------------------------

def _profiles(kabs: np.ndarray, z: float, L: float) -> tuple:
    """Vertical profiles P_k(z) of v and Q_k(z) of -d_z v, overflow-safe."""
    k = np.asarray(kabs, dtype=float)
    P = np.empty_like(k)
    Q = np.empty_like(k)
    nz = k > 0
    kk = k[nz]
    den = 1.0 + np.exp(-2.0 * kk * L)
    P[nz] = (np.exp(-kk * z) - np.exp(-kk * (2.0 * L - z))) / (kk * den)
    Q[nz] = (np.exp(-kk * z) + np.exp(-kk * (2.0 * L - z))) / den
    P[~nz] = L - z
    Q[~nz] = 1.0
    return P, Q


@dataclass(frozen=True)
class PotentialField:
    """Periodic potential v with -d_z v = u at z = 0 and v = 0 at z = L."""

    domain: DomainSpec
    coeffs: np.ndarray = field(repr=False)

    @classmethod
    def from_charge(cls, u: ChargeDensity) -> "PotentialField":
        _check_periodic(u)
        return cls.from_values(u.domain, u.as_float())

    @classmethod
    def from_values(cls, domain: DomainSpec, values: np.ndarray) -> "PotentialField":
        ax = tuple(range(domain.d - 1))
        c = np.fft.fftn(np.asarray(values, dtype=float), axes=ax) / domain.n_cells
        c.setflags(write=False)
        return cls(domain, c)

    def _k(self):
        dom = self.domain
        comps, kabs = wavenumbers(dom.N, dom.L, dom.d - 1)
        if dom.N % 2 == 0:
            # the Nyquist mode has no well-defined derivative off the grid
            comps = [np.where(np.isclose(np.abs(c), np.pi * dom.N / dom.L), 0.0, c) for c in comps]
        return comps, kabs

    def _check_heights(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0) or np.any(z > self.domain.L * (1 + 1e-12)):
            raise DomainError("heights must lie in (0, L]")
        return z

    def at_points(self, points: Sequence) -> tuple:
        """(v, b) at arbitrary points (x', x_d); b has shape (P, d)."""
        dom = self.domain
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != dom.d:
            raise InvalidInputError(f"points need {dom.d} coordinates")
        self._check_heights(pts[:, -1])
        comps, kabs = self._k()
        x0 = dom.cell_centers()[0]
        flat_c = self.coeffs.ravel()
        flat_k = [c.ravel() for c in comps]
        fk = kabs.ravel()
        v = np.empty(len(pts))
        b = np.empty((len(pts), dom.d))
        for i, p in enumerate(pts):
            phase = np.exp(1j * sum(kc * (p[a] - x0) for a, kc in enumerate(flat_k)))
            P, Q = _profiles(fk, p[-1], dom.L)
            w = flat_c * phase
            v[i] = np.sum(w * P).real
            for a, kc in enumerate(flat_k):
                b[i, a] = np.sum(-1j * kc * w * P).real
            b[i, -1] = np.sum(w * Q).real
        return v, b

    def on_grid(self, z_levels: Sequence[float], shift: float = 0.0) -> tuple:
        """v and b on the horizontal lattice x_j + shift at each height.

        Returns arrays with shape bottom_shape + (len(z),) for v and
        (d,) + bottom_shape + (len(z),) for b.  z = 0 is allowed here.
        """
        dom = self.domain
        comps, kabs = self._k()
        ax = tuple(range(dom.d - 1))
        ph = np.exp(1j * shift * sum(comps))
        z_levels = np.asarray(z_levels, dtype=float)
        nz = len(z_levels)
        v = np.empty(dom.bottom_shape + (nz,))
        b = np.empty((dom.d,) + dom.bottom_shape + (nz,))
        for i, z in enumerate(z_levels):
            P, Q = _profiles(kabs, z, dom.L)
            w = self.coeffs * ph * dom.n_cells
            v[..., i] = np.fft.ifftn(w * P, axes=ax).real
            for a, kc in enumerate(comps):
                b[(a,) + (Ellipsis,) + (i,)] = np.fft.ifftn(-1j * kc * w * P, axes=ax).real
            b[(-1, Ellipsis, i)] = np.fft.ifftn(w * Q, axes=ax).real
        return v, b


def reconstruct_field(u: ChargeDensity, points: Sequence) -> np.ndarray:
    return PotentialField.from_charge(u).at_points(points)[1]


def max_field_profile(u: ChargeDensity, heights: Sequence[float]) -> np.ndarray:
    """max over cell centres of |b(x', z)| at each height."""
    pf = PotentialField.from_charge(u)
    pf._check_heights(heights)
    _, b = pf.on_grid(heights)
    mag = np.sqrt(np.sum(b * b, axis=0))
    return mag.reshape(-1, len(heights)).max(axis=0)
