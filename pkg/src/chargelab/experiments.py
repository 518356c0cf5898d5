"""Experiment driver: scaling studies, local energy, equipartition, decay, checker harness."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import box
from .domain import ChargeDensity, DomainSpec, SigmaEstimate, load, perimeter, save, window
from .errors import ConfigError, EstimationError, NotFoundError
from .patterns import (VolumeAdjustRequest, campanato_min, sigma_difference,
                       sigma_estimate, stripe_optimum, volume_adjust, window_field)
from .spectral import PotentialField

log = logging.getLogger(__name__)


# --- results and fits ------------------------------------------------------

def fit_power_law(scales: Sequence[float], values: Sequence[float]) -> tuple:
    """Least squares of log|value| against log(scale): (exponent, intercept, rms residual)."""
    s = np.asarray(scales, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    if len(s) < 3:
        raise EstimationError("need >= 3 scales to fit an exponent")
    if np.any(np.diff(s) <= 0) or np.any(s <= 0):
        raise EstimationError("scales must be positive and strictly increasing")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise EstimationError("values must be nonzero and finite for a log-log fit")
    if np.ptp(np.log(v)) < 1e-9:
        raise EstimationError("flat series: no exponent to fit")
    A = np.column_stack([np.log(s), np.ones_like(s)])
    coef, *_ = np.linalg.lstsq(A, np.log(v), rcond=None)
    resid = np.log(v) - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid ** 2)))


@dataclass
class ExperimentResult:
    name: str
    series: list  # (scale, value)
    stderr: Optional[list] = None
    exponent: Optional[float] = None
    intercept: Optional[float] = None
    residual: Optional[float] = None
    metadata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    passes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.series:
            raise EstimationError("experiment series must be nonempty")
        sc = [s for s, _ in self.series]
        if any(b <= a for a, b in zip(sc, sc[1:])):
            raise EstimationError("experiment scales must be strictly increasing")
        if self.exponent is not None and self.residual is None:
            raise EstimationError("an exponent needs its fit residual")

    def fit(self, values: Optional[Sequence[float]] = None, scales: Optional[Sequence[float]] = None):
        sc = [s for s, _ in self.series] if scales is None else scales
        vals = [v for _, v in self.series] if values is None else values
        self.exponent, self.intercept, self.residual = fit_power_law(sc, vals)
        return self

    def summary(self) -> dict:
        return {"name": self.name, "exponent": self.exponent, "intercept": self.intercept,
                "residual": self.residual, "pass": self.passes, "metadata": self.metadata,
                "series": self.series, "extras": _jsonable(self.extras)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def emit_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "value", "stderr"])
        errs = result.stderr or [""] * len(result.series)
        for (s, v), e in zip(result.series, errs):
            w.writerow([repr(float(s)), repr(float(v)), "" if e in ("", None) else repr(float(e))])


def read_csv(path) -> tuple:
    series, errs = [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        if head != ["scale", "value", "stderr"]:
            raise ConfigError(f"{path}: unexpected CSV header {head}")
        for row in r:
            series.append((float(row[0]), float(row[1])))
            errs.append(float(row[2]) if row[2] else None)
    return series, errs


def emit_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- configuration ---------------------------------------------------------

def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text):
    return [int(t) for t in text.replace(",", " ").split()]


def _words(text):
    return [t for t in text.replace(",", " ").split()]


_SCHEMA = {
    "experiment": str,
    "d": int,
    "L": _floats,
    "h": float,
    "bc": _words,
    "seeds": _ints,
    "tol": float,
    "out": str,
    "budget": int,
    "l": _floats,
    "heights": _floats,
}

EXPERIMENTS = ("scaling", "local", "equipartition", "decay", "harness", "sigma", "anneal", "relaxed")


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "scaling"
    d: int = 2
    L: tuple = (8.0, 16.0, 32.0, 64.0)
    h: float = 0.125
    bc: tuple = ("periodic", "zero_flux", "free")
    seeds: tuple = (0,)
    tol: float = 1e-4
    out: str = "results"
    budget: int = 100
    l: tuple = (4.0, 8.0, 16.0)
    heights: tuple = (1.0, 2.0, 4.0, 8.0)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.d not in (2, 3):
            raise ConfigError("d must be 2 or 3")
        if not self.h > 0 or self.h > 0.25:
            raise ConfigError("h must lie in (0, 1/4]")
        for b in self.bc:
            if b not in ("periodic", "zero_flux", "free"):
                raise ConfigError(f"unknown class {b!r}")

    @property
    def seed(self) -> int:
        return self.seeds[0]


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            parsed = _SCHEMA[key](val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: malformed value for {key!r}: {val!r}") from None
        kw[key] = tuple(parsed) if isinstance(parsed, list) else parsed
    try:
        return RunConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


# --- candidate store -------------------------------------------------------

class CandidateStore:
    """Serialized charges keyed by (bc, L, seed) plus a line-oriented manifest."""

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    def _name(self, bc, L, seed) -> str:
        return f"{bc}_L{float(L):g}_s{int(seed)}.txt"

    def put(self, est: SigmaEstimate, seed: int = 0) -> str:
        name = self._name(est.bc, est.L, seed)
        save(est.candidate, os.path.join(self.root, name))
        entries = {k: v for k, v in self._manifest().items() if k != name}
        entries[name] = f"{est.bc} {float(est.L)!r} {int(seed)} {est.value!r} {est.method} {name}"
        with open(os.path.join(self.root, "manifest.txt"), "w") as fh:
            for k in sorted(entries):
                fh.write(entries[k] + "\n")
        return name

    def _manifest(self) -> dict:
        path = os.path.join(self.root, "manifest.txt")
        if not os.path.exists(path):
            return {}
        with open(path) as fh:
            return {ln.split()[-1]: ln.rstrip("\n") for ln in fh if ln.strip()}

    def get(self, bc: str, L: float, seed: int = 0) -> ChargeDensity:
        path = os.path.join(self.root, self._name(bc, L, seed))
        if not os.path.exists(path):
            raise NotFoundError(f"no stored {bc} candidate at L = {L} (seed {seed}) in {self.root}")
        return load(path)


# --- scaling study ---------------------------------------------------------

def _sigma_table(cfg: RunConfig, partial_path: Optional[str] = None) -> dict:
    Ls = sorted(cfg.L)
    est = {}
    try:
        for bc in cfg.bc:
            order = sorted(Ls, reverse=(bc == "free"))
            for L in order:
                extra = []
                if bc == "zero_flux":
                    extra = [est[(bc, s)].candidate for s in Ls if s < L and (bc, s) in est]
                elif bc == "free":
                    extra = [est[(bc, s)].candidate for s in Ls if s > L and (bc, s) in est]
                est[(bc, L)] = sigma_estimate(bc, L, budget=cfg.budget, d=cfg.d, h=cfg.h,
                                              seed=cfg.seed, extra=extra)
                log.info("sigma %s L=%g: %.12f (%s)", bc, L, est[(bc, L)].value, est[(bc, L)].method)
    except Exception:
        if partial_path is not None and est:
            with open(partial_path, "w") as fh:
                fh.write("bc,L,value,method\n")
                for (bc, L), e in sorted(est.items()):
                    fh.write(f"{bc},{L!r},{e.value!r},{e.method}\n")
        raise
    return est


def run_scaling_study(cfg: RunConfig, store: Optional[CandidateStore] = None,
                      estimates: Optional[dict] = None) -> ExperimentResult:
    """sigma per class and scale, class gaps, successive differences, extrapolated limit."""
    Ls = sorted(cfg.L)
    if len(Ls) < 3:
        raise EstimationError("need >= 3 scales")
    partial = os.path.join(cfg.out, "scaling_partial.csv") if store is not None else None
    est = estimates if estimates is not None else _sigma_table(cfg, partial)
    if store is not None:
        for e in est.values():
            store.put(e, cfg.seed)
    per = [est[("periodic", L)] for L in Ls]
    succ = [abs(sigma_difference(per[i + 1], per[i])) for i in range(len(Ls) - 1)]
    res = ExperimentResult("scaling", [(L, e.value) for L, e in zip(Ls, per)],
                           metadata={"h": cfg.h, "d": cfg.d, "seed": cfg.seed, "budget": cfg.budget})
    gaps = {}
    for a, b in (("periodic", "zero_flux"), ("periodic", "free"), ("zero_flux", "free")):
        if all((c, L) in est for c in (a, b) for L in Ls):
            gaps[f"{a}-{b}"] = [abs(sigma_difference(est[(a, L)], est[(b, L)])) for L in Ls]
    res.extras["sigma"] = {f"{bc}": [est[(bc, L)].value for L in Ls] for bc in cfg.bc}
    res.extras["methods"] = {f"{bc}": [est[(bc, L)].method for L in Ls] for bc in cfg.bc}
    res.extras["gaps"] = gaps
    res.extras["successive"] = succ
    if len(succ) >= 3:
        slope, icpt, resid = fit_power_law(Ls[:-1], succ)
        res.exponent, res.intercept, res.residual = slope, icpt, resid
        decay = -slope
    elif len(succ) >= 1:
        decay = math.log(succ[0] / succ[-1]) / math.log(Ls[-2] / Ls[0]) if len(succ) > 1 else float("nan")
    else:
        decay = float("nan")
    res.extras["decay_exponent"] = decay
    res.extras["sigma_star"] = richardson(Ls, [e.value for e in per], succ, decay)
    res.passes["successive_decreasing"] = all(b < a for a, b in zip(succ, succ[1:]))
    res.passes["decay_exponent"] = bool(decay >= 0.4)
    for k, g in gaps.items():
        res.passes[f"gap_decreasing[{k}]"] = all(b < a for a, b in zip(g, g[1:]))
    res.estimates = est  # in-process handle for downstream studies
    return res


def richardson(Ls, values, succ, decay) -> float:
    """Extrapolated limit sigma(L_max) + last difference / (2^decay - 1), signed."""
    if not succ or not np.isfinite(decay) or decay <= 0:
        return float(values[-1])
    sign = np.sign(values[-1] - values[-2]) if len(values) > 1 else 0.0
    ratio = Ls[-1] / Ls[-2]
    return float(values[-1] + sign * succ[-1] / (ratio ** decay - 1.0))


# --- local energy ----------------------------------------------------------

@dataclass(frozen=True)
class LocalEnergy:
    l: float
    interfacial: float
    field: float
    over_relaxed: float

    @property
    def total(self) -> float:
        return self.interfacial + self.field


def gamma_flux(pf: PotentialField, l: float) -> box.FluxData:
    """Outward flux b.nu of the reconstructed field on Gamma of the centred Q_l."""
    dom = pf.domain
    n = int(round(l / dom.h))
    sub = DomainSpec(dom.d, n * dom.h, n, n, "flux")
    z = np.arange(n + 1) * dom.h
    _, b = pf.on_grid(z, shift=-0.5 * dom.h)
    start = (dom.N - n) // 2
    idx = np.arange(start, start + n + 1) % dom.N
    for ax in range(dom.d - 1):
        b = np.take(b, idx, axis=ax + 1)
    faces = {}
    for ax in range(dom.d - 1):
        sl = [slice(None)] * dom.d
        sl[ax] = 0
        faces[f"x{ax}-"] = -b[ax][tuple(sl)]
        sl[ax] = -1
        faces[f"x{ax}+"] = b[ax][tuple(sl)]
    faces["top"] = b[-1][..., -1]
    return box.FluxData.from_faces(sub, faces)


def local_energy(u: ChargeDensity, pf: PotentialField, l: float) -> LocalEnergy:
    sub, vals = window_field(pf, l)
    grid = box.BoxGrid(sub)
    field_e = 0.5 * grid.dirichlet_form(vals)
    _, e0 = box.overrelaxed_solve(gamma_flux(pf, l))
    return LocalEnergy(l, perimeter(window(u, l)), field_e, e0)


def run_local_energy_profile(cfg: RunConfig, u: Optional[ChargeDensity] = None,
                             store: Optional[CandidateStore] = None,
                             sigmas: Optional[dict] = None) -> ExperimentResult:
    """Per-area local energies on centred sub-boxes and the over-relaxed sandwich."""
    if u is None:
        if store is None:
            raise NotFoundError("no candidate given and no store to load from")
        u = store.get("periodic", max(cfg.L), cfg.seed)
    pf = PotentialField.from_charge(u)
    ls = sorted(cfg.l)
    d = u.domain.d
    rows = [local_energy(u, pf, l) for l in ls]
    per_area = [r.total / l ** (d - 1) for r, l in zip(rows, ls)]
    e0 = [r.over_relaxed / l ** (d - 1) for r, l in zip(rows, ls)]
    mid = [p - e for p, e in zip(per_area, e0)]
    if sigmas is None:
        sigmas = {}
        for l in ls:
            for bc in ("periodic", "zero_flux"):
                sigmas[(bc, l)] = sigma_estimate(bc, l, budget=0, d=d, h=u.domain.h).value
    lo = [sigmas[("zero_flux", l)] for l in ls]
    hi = [sigmas[("periodic", l)] for l in ls]
    viol = [math.sqrt(l) * max(a - m, m - b, 0.0) for l, a, m, b in zip(ls, lo, mid, hi)]
    C = max(viol)
    res = ExperimentResult("local", list(zip(ls, per_area)), metadata={"L": u.domain.L, "h": u.domain.h})
    res.extras.update({"over_relaxed": e0, "reduced": mid, "sigma_zero_flux": lo,
                       "sigma_periodic": hi, "C": C, "violations": viol})
    res.passes["sandwich"] = all(a - C / math.sqrt(l) - 1e-12 <= m <= b + C / math.sqrt(l) + 1e-12
                                 for l, a, m, b in zip(ls, lo, mid, hi))
    res.passes["uniform_bound"] = max(per_area) <= 4.0 * min(hi)
    res.passes["over_relaxed_decreasing"] = all(b < a for a, b in zip(e0, e0[1:]))
    res.passes["over_relaxed_rate"] = all(e0[i + 1] <= e0[i] * math.sqrt(2.0) * 1.5 for i in range(len(e0) - 1))
    return res


# --- equipartition ---------------------------------------------------------

def rescale_charge(u: ChargeDensity, k: int) -> ChargeDensity:
    """The pair at k times the scale: every cell replaced by k^{d-1} copies (k = 1 is the identity)."""
    if k < 1:
        raise ConfigError("rescale factor must be a positive integer")
    vals = u.values
    for ax in range(u.domain.d - 1):
        vals = np.repeat(vals, k, axis=ax)
    dom = u.domain
    big = DomainSpec(dom.d, k * dom.L, k * dom.N, None if dom.M == dom.N else k * dom.M, dom.bc)
    return ChargeDensity(big, vals)


def run_equipartition_study(cfg: RunConfig, u: Optional[ChargeDensity] = None,
                            store: Optional[CandidateStore] = None,
                            sigma_star: Optional[float] = None) -> ExperimentResult:
    if u is None:
        if store is None:
            raise NotFoundError("no candidate given and no store to load from")
        u = store.get("periodic", max(cfg.L), cfg.seed)
    pf = PotentialField.from_charge(u)
    d = u.domain.d
    ls = sorted(cfg.l)
    a, b = [], []
    for l in ls:
        sub, vals = window_field(pf, l)
        a.append(perimeter(window(u, l)) / l ** (d - 1))
        b.append(0.5 * box.BoxGrid(sub).dirichlet_form(vals) / l ** (d - 1))
    imb = [abs(x - y) / (x + y) for x, y in zip(a, b)]
    res = ExperimentResult("equipartition", list(zip(ls, imb)), metadata={"L": u.domain.L})
    res.extras.update({"interfacial": a, "field": b})
    if sigma_star is not None:
        res.extras["sigma_star"] = sigma_star
        res.extras["a_dev"] = [abs(x - sigma_star / 2) for x in a]
        res.extras["b_dev"] = [abs(y - sigma_star / 2) for y in b]
        res.passes["halves_at_largest_l"] = res.extras["a_dev"][-1] <= 0.2 and res.extras["b_dev"][-1] <= 0.2
    try:
        res.fit()
    except EstimationError as exc:
        res.extras["fit_error"] = str(exc)
    by_l = dict(zip(ls, imb))
    if 16.0 in by_l and 4.0 in by_l:
        res.passes["imbalance_16"] = by_l[16.0] <= 0.15
        res.passes["imbalance_decreases"] = by_l[16.0] < by_l[4.0]
    return res


# --- decay profile ---------------------------------------------------------

def field_maxima(pf: PotentialField, heights: Sequence[float], shifts: int = 4) -> np.ndarray:
    """max over x' of |b(x', x_d)|, sampling each cell at `shifts` offsets."""
    h = pf.domain.h
    best = np.zeros(len(heights))
    for s in range(shifts):
        _, b = pf.on_grid(heights, shift=-0.5 * h + s * h / shifts)
        mag = np.sqrt(np.sum(b * b, axis=0)).reshape(-1, len(heights))
        best = np.maximum(best, mag.max(axis=0))
    return best


def holder_profile(pf: PotentialField, z_max: float = 4.0) -> tuple:
    """Dyadic scales r and max |v(x) - v(y)| / r^{1/2} over horizontal and vertical pairs at distance r."""
    dom = pf.domain
    h = dom.h
    zs = np.arange(0, int(round(z_max / h)) + 1) * h
    v, _ = pf.on_grid(zs, shift=-0.5 * h)
    v = v.reshape(-1, dom.N, len(zs)) if dom.d == 3 else v
    scales, vals = [], []
    k = 1
    while k * h <= min(dom.L / 2, z_max / 2) + 1e-12:
        r = k * h
        dh = np.abs(np.roll(v, -k, axis=0) - v)
        dv = np.abs(v[..., k:] - v[..., :-k])
        scales.append(r)
        vals.append(max(float(dh.max()), float(dv.max())) / math.sqrt(r))
        k *= 2
    return np.array(scales), np.array(vals)


def run_decay_profile(cfg: RunConfig, u: Optional[ChargeDensity] = None,
                      store: Optional[CandidateStore] = None) -> ExperimentResult:
    if u is None:
        if store is None:
            raise NotFoundError("no candidate given and no store to load from")
        u = store.get("periodic", max(cfg.L), cfg.seed)
    pf = PotentialField.from_charge(u)
    h = u.domain.h
    far = [z for z in sorted(cfg.heights) if z <= u.domain.L]
    bmax = field_maxima(pf, far)
    res = ExperimentResult("decay", list(zip(far, bmax.tolist())), metadata={"L": u.domain.L, "h": h})
    try:
        res.fit()
        res.passes["far_field_exponent"] = -0.65 <= res.exponent <= -0.35
    except EstimationError as exc:
        res.extras["fit_error"] = str(exc)
        res.passes["far_field_exponent"] = False
    near = np.geomspace(h, 0.25, 8)
    bnear = field_maxima(pf, near)
    x = np.log(1.0 / near)
    corr = float(np.corrcoef(x, bnear)[0, 1]) if np.ptp(bnear) > 0 else float("nan")
    res.extras.update({"near_heights": near.tolist(), "near_max": bnear.tolist(), "near_corr": corr})
    res.passes["near_log_model"] = bool(corr >= 0.9)
    r, hs = holder_profile(pf)
    big = r >= 1.0 - 1e-12
    C = float(hs[big].max()) if big.any() else float(hs.max())
    res.extras.update({"holder_scales": r.tolist(), "holder_values": hs.tolist(), "holder_C": C})
    res.passes["holder_bounded"] = bool(np.all(hs[~big] <= C * (1 + 1e-12)))
    # over-relaxed charge density on the bottom of a centred window
    l = min(16.0, u.domain.L / 2)
    g = gamma_flux(pf, l)
    v0, _ = box.overrelaxed_solve(g)
    sub = g.domain
    dz = sub.hz
    dens = np.abs(v0.values[..., 1] - v0.values[..., 0]) / dz
    xs = box.BoxGrid(sub).coords(0)
    dist = 0.5 * sub.L - np.abs(xs)
    if sub.d == 3:
        dist = np.minimum.outer(dist, dist)
    ok = dist > 0
    env = float(np.max(dens[ok] * np.sqrt(dist[ok]))) if ok.any() else 0.0
    res.extras["over_relaxed_density_C"] = env
    return res


# --- checker harness -------------------------------------------------------

@dataclass
class HarnessReport:
    checks: list = field(default_factory=list)  # (name, passed, margin, detail)

    def add(self, name, passed, margin=None, detail=""):
        self.checks.append((name, bool(passed), margin, detail))

    @property
    def ok(self) -> bool:
        return all(p for _, p, _, _ in self.checks)

    def lines(self) -> list:
        out = []
        for name, p, m, detail in self.checks:
            ms = "" if m is None else f" margin={m:.3e}"
            out.append(f"{'PASS' if p else 'FAIL'} {name}{ms} {detail}".rstrip())
        return out


def calibrate_constant(ratios: Sequence[float], slack: float = 1.2) -> float:
    return slack * float(np.max(ratios))


EPS_GRID = (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0)


def normal_flux_audit(rng: np.random.Generator, cutoffs=(4, 8, 16), n: int = 1000, d: int = 3) -> dict:
    """Flux ratios over n random mode sets per cutoff.

    Each mode set contributes its sampled-amplitude ratio and its worst ratio
    over all amplitudes.  C is fitted per cutoff on the worst ratios of the
    even-indexed sets; the odd-indexed sets and every sampled ratio are the holdout.
    """
    per, sampled, hold = {}, {}, {}
    for cut in cutoffs:
        calib, held, raw = [], [], []
        for i in range(n):
            m = box.random_flux_modes(rng, d, cut)
            raw.append(box.normal_flux_check(m, verify=(i < 5)))
            (calib if i % 2 == 0 else held).append(box.normal_flux_worst(m))
        per[cut] = calibrate_constant(calib)
        sampled[cut] = float(max(raw))
        hold[cut] = float(max(held))
    Cs = np.array(list(per.values()))
    C = float(Cs.min())
    worst = max(max(sampled.values()), max(hold.values()))
    return {"C": C, "C_cut": per, "sampled_max": sampled, "holdout_max": hold,
            "spread": float(Cs.max() / Cs.min() - 1.0), "margin": float(C - worst)}


def _trace_ratio(w, dom) -> float:
    best = 0.0
    for e in EPS_GRID:
        lhs, br = box.trace_terms(w, dom, e)
        if br > 0:
            best = max(best, lhs / br)
    return best


def trace_audit(rng: np.random.Generator, resolutions=(16, 32, 64), n: int = 500, L: float = 4.0) -> dict:
    """Calibrate C per resolution on half the samples (plus the constant probe), check the rest."""
    per_res = n // len(resolutions)
    out = {"C_res": {}, "holdout_max": {}}
    for N in resolutions:
        dom = DomainSpec(2, L, N)
        # constants are the extremal case at eps = 1, so calibration always sees one
        calib = [_trace_ratio(np.ones(box.BoxGrid(dom).shape), dom)]
        hold = []
        for i in range(per_res):
            r = _trace_ratio(box.random_band_limited(dom, rng), dom)
            (calib if i % 2 == 0 else hold).append(r)
        out["C_res"][N] = calibrate_constant(calib)
        out["holdout_max"][N] = float(max(hold))
    Cs = np.array(list(out["C_res"].values()))
    out["C"] = float(Cs.max())
    out["spread"] = float(Cs.max() / Cs.min() - 1.0)
    out["margin"] = float(out["C"] - max(out["holdout_max"].values()))
    return out


def basic_inequalities(est: dict, Ls: Sequence[float], vi_Ls: Optional[Sequence[float]] = None) -> tuple:
    """(name, margin) for the comparisons between class estimates, and the fitted C of the C/L bound.

    The uniform bounds on zero_flux (above) and free (below) are calibrated
    on the two smallest scales and checked on the rest.
    """
    Ls = sorted(Ls)
    vi_Ls = Ls if vi_Ls is None else sorted(vi_Ls)
    out = []
    for L in Ls:
        f, p, z = est[("free", L)], est[("periodic", L)], est[("zero_flux", L)]
        out.append((f"(i) free<=periodic L={L:g}", sigma_difference(p, f)))
        out.append((f"(i) free<=zero_flux L={L:g}", sigma_difference(z, f)))
    for i, L in enumerate(Ls):
        for K in Ls[i + 1:]:
            k = K / L
            if abs(k - round(k)) > 1e-9:
                continue
            out.append((f"(ii) free monotone L={L:g}->{K:g}",
                        sigma_difference(est[("free", K)], est[("free", L)])))
            out.append((f"(iii) zero_flux tiling L={L:g}->{K:g}",
                        sigma_difference(est[("zero_flux", L)], est[("zero_flux", K)])))
    cal, hold = Ls[:2], Ls[2:] or Ls
    Cz = calibrate_constant([est[("zero_flux", L)].value for L in cal])
    for L in hold:
        out.append((f"(iv) zero_flux<=C L={L:g}", Cz - est[("zero_flux", L)].value))
    c_low = min(est[("free", L)].value for L in cal) / 1.2
    for L in hold:
        out.append((f"(v) free>=1/C L={L:g}", est[("free", L)].value - c_low))
    Cvi = max(L * sigma_difference(est[("periodic", L)], est[("free", L)]) for L in vi_Ls)
    for L in vi_Ls:
        out.append((f"(vi) periodic<=free+C/L L={L:g}",
                    est[("free", L)].value + Cvi / L - est[("periodic", L)].value))
    return out, Cvi


def run_check_harness(cfg: RunConfig, estimates: Optional[dict] = None, quick: bool = True) -> HarnessReport:
    """All checker audits plus the class comparisons; failures are collected, never raised."""
    rng = np.random.default_rng(cfg.seed)
    rep = HarnessReport()

    def guarded(name, fn):
        try:
            fn()
        except Exception as exc:  # a crashing check is a failed check
            rep.add(name, False, None, f"error: {exc}")

    def ortho():
        dom = DomainSpec(2, 4.0, 32)
        n_fields = 20 if quick else 100
        worst = max(box.orthogonality_residual(box.DiscreteField.random_divergence_free(dom, rng))
                    for _ in range(n_fields))
        rep.add("orthogonality", worst <= 1e-8, 1e-8 - worst, f"fields={n_fields}")

    def hardy():
        worst = 0.0
        for _ in range(100 if quick else 1000):
            b = rng.exponential(size=200) * (rng.random(200) < rng.random())
            worst = max(worst, box.hardy_check(b)[2])
        rep.add("hardy", worst <= 4 + 1e-9, 4 - worst)

    def nflux():
        a = normal_flux_audit(rng, n=200 if quick else 1000)
        rep.add("normal flux", a["margin"] >= 0 and a["spread"] <= 0.2, a["margin"],
                " ".join(f"C{k}={v:.3f}" for k, v in a["C_cut"].items()))

    def trace():
        a = trace_audit(rng, n=120 if quick else 500)
        rep.add("trace", a["margin"] >= 0 and a["spread"] <= 0.2, a["margin"], f"C={a['C']:.3f}")

    def block():
        ratios = []
        for lam in (1.0, 2.0):
            cell = DomainSpec(2, lam, int(round(16 * lam)))
            data = np.where(cell.cell_centers() < 0, 1.0, -1.0)
            _, e = box.harmonic_building_block(data, cell)
            ratios.append(e / box.building_block_bound(data, cell, 2.0))
        rep.add("building block scaling", ratios[1] <= ratios[0] * 1.2, ratios[0] * 1.2 - ratios[1])

    for name, fn in (("orthogonality", ortho), ("hardy", hardy), ("normal flux", nflux),
                     ("trace", trace), ("building block scaling", block)):
        guarded(name, fn)

    if estimates is not None:
        def ineq():
            Ls = sorted({L for (_, L) in estimates})
            rows, Cvi = basic_inequalities(estimates, Ls, [L for L in Ls if L <= 32] or Ls)
            for name, margin in rows:
                rep.add(name, margin >= -1e-6, margin)
            rep.add("(vi) constant", np.isfinite(Cvi) and Cvi >= 0, Cvi, f"C={Cvi:.4g}")
        guarded("basic inequalities", ineq)
    return rep


def volume_audit(rng: np.random.Generator, trials: int = 200, N: int = 32, L: float = 4.0,
                 m0: float = 0.25) -> dict:
    """Randomized volume adjustments meeting the hypotheses; worst ratios and one fitted C."""
    dom = DomainSpec(2, L, N, bc="free")
    q = 2.0 / dom.n_cells
    kmax = int(m0 / q)
    rows = []
    while len(rows) < trials:
        vals = np.where(rng.random(dom.n_cells) < rng.uniform(0.3, 0.7), 1, -1)
        width = int(rng.integers(1, 8))
        vals = np.sign(np.convolve(vals, np.ones(2 * width + 1), mode="same")).astype(int)
        vals[vals == 0] = 1
        u = ChargeDensity(dom, vals)
        if abs(u.mean) > 0.5 or u.values.min() == u.values.max():
            continue
        m = float(rng.choice([-1, 1])) * int(rng.integers(1, kmax + 1)) * q
        req = VolumeAdjustRequest(m=m, m0=m0, Lambda=perimeter(u) + 1.0, lam=L)
        v = volume_adjust(u, req)
        shift = abs(v.mean - u.mean - m) / q
        l1 = float(np.abs(v.values.astype(int) - u.values).sum()) * dom.cell_area
        dper = perimeter(v) - perimeter(u)
        rows.append((shift, l1 / abs(m), dper / (L ** (dom.d - 2) * abs(m))))
    rows = np.array(rows)
    C = float(max(rows[:, 1].max(), rows[:, 2].max()))
    return {"mean_quanta": float(rows[:, 0].max()), "l1": float(rows[:, 1].max()),
            "perimeter": float(rows[:, 2].max()), "C": C, "trials": trials}
