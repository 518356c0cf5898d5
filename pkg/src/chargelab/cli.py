"""Command-line entry points: chargelab <command> [options]."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import experiments as ex
from .box import FluxData
from .domain import DomainSpec, save
from .errors import ChargeLabError
from .patterns import AnnealConfig, anneal_minimize, sigma_estimate
from .relaxed import dual_solve, round_to_binary

log = logging.getLogger("chargelab")


def _config(args) -> ex.RunConfig:
    cfg = ex.parse_config(args.config) if args.config else ex.RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seeds"] = (args.seed,)
    if args.out is not None:
        kw["out"] = args.out
    if args.tol is not None:
        kw["tol"] = args.tol
    if getattr(args, "L", None):
        kw["L"] = tuple(args.L)
    if getattr(args, "budget", None) is not None:
        kw["budget"] = args.budget
    return replace(cfg, **kw) if kw else cfg


def _out(cfg) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def cmd_sigma(args) -> int:
    cfg = _config(args)
    for L in cfg.L:
        est = sigma_estimate(args.bc, L, budget=cfg.budget, d=cfg.d, h=cfg.h, seed=cfg.seed)
        print(f"{args.bc},{L:g},{est.value!r},{est.method}")
    return 0


def cmd_anneal(args) -> int:
    cfg = _config(args)
    L = cfg.L[0]
    dom = DomainSpec(cfg.d, L, int(round(L / cfg.h)), bc=args.bc)
    ac = AnnealConfig.balanced(seed=cfg.seed, sweeps=cfg.budget) if args.bc == "zero_flux" \
        else AnnealConfig(seed=cfg.seed, sweeps=cfg.budget)
    u, br, _ = anneal_minimize(dom, ac)
    out = _out(cfg)
    path = os.path.join(out, f"anneal_{args.bc}_L{L:g}_s{cfg.seed}.txt")
    save(u, path)
    print(f"per_area={br.per_area!r} interfacial={br.interfacial!r} field={br.field!r} -> {path}")
    return 0


def cmd_relaxed(args) -> int:
    cfg = _config(args)
    L = cfg.L[0]
    N = int(round(L / cfg.h))
    dom = DomainSpec(cfg.d, L, N, bc="flux")
    rng = np.random.default_rng(cfg.seed)
    g = FluxData.from_function(dom, lambda p, n: args.amplitude * rng.normal(size=p.shape[:-1]))
    st = dual_solve(g, tol=cfg.tol)
    print(f"E_rel={st.E_rel!r} gap={st.relative_gap:.3e} iterations={st.iterations}")
    if args.round:
        try:
            _, _, br = round_to_binary(st)
            print(f"rounded total={br.total!r}")
        except ChargeLabError as exc:
            print(f"rounding skipped: {exc}")
    return 0


def _scaling(cfg, store):
    res = ex.run_scaling_study(cfg, store)
    out = _out(cfg)
    ex.emit_csv(res, os.path.join(out, "scaling.csv"))
    ex.emit_json(res.summary(), os.path.join(out, "scaling.json"))
    return res


def cmd_scaling(args) -> int:
    cfg = _config(args)
    store = ex.CandidateStore(os.path.join(_out(cfg), "candidates"))
    res = _scaling(cfg, store)
    for k, v in res.passes.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    print(f"sigma_star={res.extras['sigma_star']!r}")
    return 0 if all(res.passes.values()) else 1


def _stored(cfg) -> ex.CandidateStore:
    return ex.CandidateStore(os.path.join(_out(cfg), "candidates"))


def _report(res, cfg, name) -> int:
    out = _out(cfg)
    ex.emit_csv(res, os.path.join(out, f"{name}.csv"))
    ex.emit_json(res.summary(), os.path.join(out, f"{name}.json"))
    for k, v in res.passes.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return 0 if all(res.passes.values()) else 1


def cmd_equipartition(args) -> int:
    cfg = _config(args)
    return _report(ex.run_equipartition_study(cfg, store=_stored(cfg)), cfg, "equipartition")


def cmd_local(args) -> int:
    cfg = _config(args)
    return _report(ex.run_local_energy_profile(cfg, store=_stored(cfg)), cfg, "local")


def cmd_decay(args) -> int:
    cfg = _config(args)
    return _report(ex.run_decay_profile(cfg, store=_stored(cfg)), cfg, "decay")


def cmd_verify(args) -> int:
    cfg = _config(args)
    est = None
    if args.with_sigma:
        est = ex.run_scaling_study(cfg).estimates
    rep = ex.run_check_harness(cfg, est, quick=not args.full)
    for line in rep.lines():
        print(line)
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--tol", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="chargelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sigma", parents=[common], help="energy-density estimate per class")
    s.add_argument("--bc", default="periodic", choices=["periodic", "zero_flux", "free"])
    s.add_argument("--L", type=float, nargs="+")
    s.add_argument("--budget", type=int)
    s.set_defaults(fn=cmd_sigma)

    s = sub.add_parser("anneal", parents=[common], help="simulated annealing from scratch")
    s.add_argument("--bc", default="periodic", choices=["periodic", "zero_flux", "free"])
    s.add_argument("--L", type=float, nargs="+")
    s.add_argument("--budget", type=int)
    s.set_defaults(fn=cmd_anneal)

    s = sub.add_parser("relaxed", parents=[common], help="relaxed dual solve on random boundary data")
    s.add_argument("--L", type=float, nargs="+")
    s.add_argument("--amplitude", type=float, default=0.1)
    s.add_argument("--round", action="store_true", help="also round to a +-1 charge")
    s.set_defaults(fn=cmd_relaxed)

    s = sub.add_parser("scaling", parents=[common], help="scaling study; stores candidates")
    s.add_argument("--L", type=float, nargs="+")
    s.add_argument("--budget", type=int)
    s.set_defaults(fn=cmd_scaling)

    for name, fn, text in (("equipartition", cmd_equipartition, "interfacial/field balance"),
                           ("local", cmd_local, "local energy sandwich"),
                           ("decay", cmd_decay, "field decay profiles")):
        s = sub.add_parser(name, parents=[common], help=f"{text} on a stored candidate")
        s.add_argument("--L", type=float, nargs="+", help="scales of the stored study (largest is used)")
        s.set_defaults(fn=fn)

    s = sub.add_parser("verify", parents=[common], help="checker harness")
    s.add_argument("--full", action="store_true", help="full sample sizes")
    s.add_argument("--with-sigma", action="store_true", help="also compare sigma estimates")
    s.add_argument("--L", type=float, nargs="+")
    s.add_argument("--budget", type=int)
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    t0 = time.time()
    try:
        code = args.fn(args)
    except ChargeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1f s", args.command, time.time() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
