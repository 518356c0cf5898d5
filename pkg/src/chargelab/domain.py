"""Geometry, the binary surface charge, and energy bookkeeping.

The box is Q_L = (-L/2, L/2)^{d-1} x (0, L).  Its bottom face is cut into
N^{d-1} cells of width h = L/N and the charge u is constant (+1 or -1) on
each cell.  Cell j along an axis is centred at -L/2 + (j + 1/2) h.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

BC_CLASSES = ("periodic", "free", "zero_flux", "flux")
H_MAX = 0.25


@dataclass(frozen=True)
class DomainSpec:
    d: int
    L: float
    N: int
    M: Optional[int] = None
    bc: str = "periodic"

    def __post_init__(self):
        if self.d not in (2, 3):
            raise InvalidInputError(f"d must be 2 or 3, got {self.d}")
        L = float(self.L)
        object.__setattr__(self, "L", L)
        if not np.isfinite(L) or L <= 0:
            raise InvalidInputError(f"L must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 4:
            raise InvalidInputError(f"N must be an integer >= 4, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        M = self.N if self.M is None else self.M
        if int(M) != M or M < 4:
            raise InvalidInputError(f"M must be an integer >= 4, got {M}")
        object.__setattr__(self, "M", int(M))
        if self.bc not in BC_CLASSES:
            raise InvalidInputError(f"unknown boundary class {self.bc!r}")
        if self.h > H_MAX + 1e-15:
            raise InvalidInputError(
                f"cell width h = L/N = {self.h} exceeds {H_MAX}; the unit pattern scale is unresolved")
        if self.bc == "zero_flux" and (self.N ** (self.d - 1)) % 2:
            raise InvalidInputError("zero_flux needs an even number of bottom cells")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def hz(self) -> float:
        return self.L / self.M

    @property
    def bottom_shape(self) -> tuple:
        return (self.N,) * (self.d - 1)

    @property
    def n_cells(self) -> int:
        return self.N ** (self.d - 1)

    @property
    def cell_area(self) -> float:
        return self.h ** (self.d - 1)

    @property
    def bottom_area(self) -> float:
        return self.L ** (self.d - 1)

    @property
    def volume(self) -> float:
        return self.L ** self.d

    def cell_centers(self) -> np.ndarray:
        """1D array of cell-centre coordinates along one horizontal axis."""
        return -0.5 * self.L + (np.arange(self.N) + 0.5) * self.h

    def with_bc(self, bc: str) -> "DomainSpec":
        return DomainSpec(self.d, self.L, self.N, self.M, bc)


@dataclass(frozen=True)
class ChargeDensity:
    domain: DomainSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.domain.bottom_shape:
            raise InvalidInputError(f"charge shape {v.shape} != {self.domain.bottom_shape}")
        if not np.all((v == 1) | (v == -1)):
            raise InvalidInputError("charge entries must be +1 or -1")
        v = v.astype(np.int8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.domain.bc == "zero_flux" and int(v.sum(dtype=np.int64)) != 0:
            raise InvalidInputError("zero_flux charge must have vanishing total")

    @property
    def mean(self) -> float:
        return float(self.values.mean(dtype=np.float64))

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def flipped(self) -> "ChargeDensity":
        return ChargeDensity(self.domain, -self.values)

    def with_domain(self, domain: DomainSpec) -> "ChargeDensity":
        return ChargeDensity(domain, self.values)

    def __eq__(self, other):
        if not isinstance(other, ChargeDensity):
            return NotImplemented
        return self.domain == other.domain and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.domain, self.values.tobytes()))


@dataclass(frozen=True)
class EnergyBreakdown:
    interfacial: float
    field: float
    total: float
    per_area: float
    per_volume: float

    def __post_init__(self):
        if self.interfacial < 0 or self.field < 0:
            raise InvalidInputError("energy components must be nonnegative")


@dataclass(frozen=True)
class SigmaEstimate:
    bc: str
    L: float
    value: float
    method: str
    certified_upper: bool
    candidate: Optional[ChargeDensity] = field(default=None, repr=False, compare=False)
    breakdown: Optional[EnergyBreakdown] = field(default=None, repr=False, compare=False)
    stripe: Optional[tuple] = None  # (period, offset) when the candidate is a stripe

    def __post_init__(self):
        if not self.value > 0:
            raise InvalidInputError(f"sigma estimate must be positive, got {self.value}")
        if self.method not in ("anneal", "stripe", "relax_round"):
            raise InvalidInputError(f"unknown estimate method {self.method!r}")


def _pair_counts(values: np.ndarray, periodic: bool) -> tuple:
    """(opposite-sign adjacent pairs, total adjacent pairs)."""
    jumps = 0
    pairs = 0
    for ax in range(values.ndim):
        if periodic:
            diff = values != np.roll(values, -1, axis=ax)
        else:
            a = np.take(values, range(values.shape[ax] - 1), axis=ax)
            b = np.take(values, range(1, values.shape[ax]), axis=ax)
            diff = a != b
        jumps += int(diff.sum())
        pairs += diff.size
    return jumps, pairs


def perimeter_values(values: np.ndarray, h: float, d: int, periodic: bool) -> float:
    jumps, _ = _pair_counts(np.asarray(values), periodic)
    return 2.0 * h ** (d - 2) * jumps


def perimeter(u: ChargeDensity) -> float:
    """Anisotropic total variation: 2 h^{d-2} per opposite-sign facet."""
    dom = u.domain
    return perimeter_values(u.values, dom.h, dom.d, dom.bc == "periodic")


def max_perimeter(domain: DomainSpec) -> float:
    shape = domain.bottom_shape
    _, pairs = _pair_counts(np.zeros(shape, dtype=np.int8), domain.bc == "periodic")
    return 2.0 * domain.h ** (domain.d - 2) * pairs


def total_energy(u: ChargeDensity, field_energy: float) -> EnergyBreakdown:
    if not np.isfinite(field_energy) or field_energy < 0:
        raise InvalidInputError(f"field energy must be finite and nonnegative, got {field_energy}")
    interfacial = perimeter(u)
    total = interfacial + float(field_energy)
    dom = u.domain
    return EnergyBreakdown(interfacial, float(field_energy), total,
                           total / dom.bottom_area, total / dom.volume)


def admissibility_check(u: ChargeDensity, g=None, tol: float = 1e-9) -> list:
    """Return a list of violation strings; empty means admissible."""
    dom = u.domain
    out = []
    if dom.bc == "zero_flux" and int(u.values.sum(dtype=np.int64)) != 0:
        out.append("zero_flux class needs vanishing total charge")
    if dom.bc == "flux":
        if g is None:
            out.append("flux class needs boundary data")
        else:
            total = float(g.total_flux)
            cap = dom.bottom_area
            if abs(total) > cap * (1 + tol):
                out.append("flux exceeds bottom capacity")
            charge = float(u.values.sum(dtype=np.int64)) * dom.cell_area
            if abs(charge - total) > tol * max(1.0, cap):
                out.append("bottom charge does not balance boundary flux")
    return out


# --- serialization -----------------------------------------------------

def dumps(u: ChargeDensity) -> str:
    dom = u.domain
    head = f"{dom.d} {dom.N} {dom.L!r} {dom.bc}"
    if dom.M != dom.N:
        head += f" {dom.M}"
    rows = u.values.reshape(-1, dom.N)
    lines = [head] + [" ".join("1" if x > 0 else "-1" for x in row) for row in rows]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ChargeDensity:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty charge file")
    head = lines[0].split()
    if len(head) not in (4, 5):
        raise InvalidInputError(f"bad header {lines[0]!r}")
    try:
        d, N, L = int(head[0]), int(head[1]), float(head[2])
        M = int(head[4]) if len(head) == 5 else None
    except ValueError as exc:
        raise InvalidInputError(f"bad header {lines[0]!r}") from exc
    dom = DomainSpec(d, L, N, M, head[3])
    rows = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            rows.append([int(t) for t in ln.split()])
        except ValueError as exc:
            raise InvalidInputError(f"line {k}: non-integer token") from exc
    vals = np.array(rows, dtype=np.int64)
    if vals.size != dom.n_cells:
        raise InvalidInputError(f"expected {dom.n_cells} entries, got {vals.size}")
    return ChargeDensity(dom, vals.reshape(dom.bottom_shape))


def save(u: ChargeDensity, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(u))


def load(path) -> ChargeDensity:
    with open(path) as fh:
        return loads(fh.read())


# --- constructors ------------------------------------------------------

def constant(domain: DomainSpec, sign: int = 1) -> ChargeDensity:
    return ChargeDensity(domain, np.full(domain.bottom_shape, sign, dtype=np.int8))


def stripes(domain: DomainSpec, period_cells: int, offset_cells: int = 0) -> ChargeDensity:
    """Square wave along the first axis; +1 on [offset, offset + period/2) mod period."""
    if period_cells < 2 or period_cells % 2:
        raise InvalidInputError("stripe period must be an even number of cells")
    j = (np.arange(domain.N) - offset_cells) % period_cells
    row = np.where(j < period_cells // 2, 1, -1).astype(np.int8)
    shape = domain.bottom_shape
    vals = np.broadcast_to(row.reshape((-1,) + (1,) * (domain.d - 2)), shape).copy()
    return ChargeDensity(domain, vals)


def cosine_stripes(domain: DomainSpec, period_cells: int) -> ChargeDensity:
    """Stripes equal to sign cos(2 pi x_1 / p) about the centre of the bottom face.

    Needs N/2 + p/4 cells to be an integer, i.e. p divisible by 4.
    """
    if period_cells % 4:
        raise InvalidInputError("cosine stripes need a period divisible by 4 cells")
    return stripes(domain, period_cells, offset_cells=domain.N // 2 - period_cells // 4)


def random_charge(domain: DomainSpec, rng: np.random.Generator, balanced: bool = False) -> ChargeDensity:
    n = domain.n_cells
    if balanced:
        vals = np.array([1] * (n // 2) + [-1] * (n - n // 2), dtype=np.int8)
        rng.shuffle(vals)
    else:
        vals = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    return ChargeDensity(domain, vals.reshape(domain.bottom_shape))


def checkerboard(domain: DomainSpec) -> ChargeDensity:
    idx = np.indices(domain.bottom_shape).sum(axis=0)
    return ChargeDensity(domain, np.where(idx % 2 == 0, 1, -1).astype(np.int8))


def window(u: ChargeDensity, l: float, origin: Optional[Sequence[float]] = None,
           bc: str = "free") -> ChargeDensity:
    """Restriction of u to the bottom of the sub-box of side l.

    The sub-box is centred on the bottom face unless `origin` (lower corner,
    in domain coordinates) is given.  Periodic domains wrap.
    """
    dom = u.domain
    n = l / dom.h
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise InvalidInputError(f"window side {l} is not a multiple of h = {dom.h}")
    n = int(round(n))
    if n > dom.N:
        raise InvalidInputError(f"window side {l} exceeds L = {dom.L}")
    if origin is None:
        starts = [(dom.N - n) // 2] * (dom.d - 1)
    else:
        starts = [int(round((o + 0.5 * dom.L) / dom.h)) for o in origin]
    periodic = dom.bc == "periodic"
    sl = u.values
    for ax, s in enumerate(starts):
        idx = np.arange(s, s + n)
        if not periodic and (idx.min() < 0 or idx.max() >= dom.N):
            raise InvalidInputError("window leaves the domain")
        sl = np.take(sl, idx % dom.N, axis=ax)
    sub = DomainSpec(dom.d, n * dom.h, n, max(4, int(round(n * dom.h / dom.hz))), "free")
    return ChargeDensity(sub.with_bc(bc), sl)
