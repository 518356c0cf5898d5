import json

import numpy as np
import pytest

from chargelab import experiments as ex
from chargelab.domain import DomainSpec, constant, cosine_stripes, stripes
from chargelab.errors import ConfigError, EstimationError, NotFoundError
from chargelab.patterns import sigma_estimate


def test_config_parse_and_errors(tmp_path):
    cfg = ex.parse_config_text("experiment = decay\nL = 8, 16 32  # comment\nseeds = 3\n\nbc = periodic\n")
    assert cfg.experiment == "decay" and cfg.L == (8.0, 16.0, 32.0) and cfg.seed == 3
    assert cfg.bc == ("periodic",) and cfg.h == 0.125
    with pytest.raises(ConfigError, match=r"run.cfg:2: unknown key 'colour'"):
        ex.parse_config_text("d = 2\ncolour = red\n", "run.cfg")
    with pytest.raises(ConfigError, match=r":1: malformed value for 'h'"):
        ex.parse_config_text("h = small")
    with pytest.raises(ConfigError, match=r":3: expected"):
        ex.parse_config_text("d = 2\n\njust words\n")
    with pytest.raises(ConfigError, match="unknown class"):
        ex.parse_config_text("bc = periodic, robin")
    with pytest.raises(ConfigError):
        ex.RunConfig(experiment="nothing")
    p = tmp_path / "a.cfg"
    p.write_text("budget = 7\n")
    assert ex.parse_config(p).budget == 7


def test_fit_guards():
    s, c, r = ex.fit_power_law([1, 2, 4, 8], [3 * x ** -0.5 for x in (1, 2, 4, 8)])
    assert s == pytest.approx(-0.5) and np.exp(c) == pytest.approx(3.0) and r < 1e-12
    with pytest.raises(EstimationError, match=">= 3"):
        ex.fit_power_law([1, 2], [1, 2])
    with pytest.raises(EstimationError):
        ex.fit_power_law([1, 1, 2], [1, 2, 3])
    with pytest.raises(EstimationError, match="flat"):
        ex.fit_power_law([1, 2, 4], [5.0, 5.0, 5.0])
    with pytest.raises(EstimationError):
        ex.ExperimentResult("x", [])
    with pytest.raises(EstimationError):
        ex.ExperimentResult("x", [(2, 1.0), (1, 1.0)])
    with pytest.raises(EstimationError):
        ex.ExperimentResult("x", [(1, 1.0)], exponent=1.0)


def test_csv_json_round_trip(tmp_path):
    res = ex.ExperimentResult("demo", [(1.0, 0.1), (2.0, 1 / 3), (4.0, 2.0 ** -0.5)],
                              stderr=[0.0, 1e-3, 2e-3])
    ex.emit_csv(res, tmp_path / "r.csv")
    series, errs = ex.read_csv(tmp_path / "r.csv")
    assert series == res.series and errs == res.stderr
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        ex.read_csv(tmp_path / "bad.csv")
    res.fit()
    ex.emit_json(res.summary(), tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert back["name"] == "demo" and back["exponent"] == pytest.approx(res.exponent)


def test_candidate_store(tmp_path):
    store = ex.CandidateStore(tmp_path / "c")
    est = sigma_estimate("periodic", 8.0, budget=0)
    name = store.put(est, seed=4)
    assert name == "periodic_L8_s4.txt"
    assert store.get("periodic", 8.0, 4) == est.candidate
    store.put(est, seed=4)
    assert len((tmp_path / "c" / "manifest.txt").read_text().splitlines()) == 1
    with pytest.raises(NotFoundError):
        store.get("periodic", 16.0, 4)


def test_scaling_guard_and_small_study(tmp_path):
    with pytest.raises(EstimationError):
        ex.run_scaling_study(ex.RunConfig(L=(8.0, 16.0)))
    cfg = ex.RunConfig(L=(2.0, 4.0, 8.0), budget=0, out=str(tmp_path))
    store = ex.CandidateStore(tmp_path / "c")
    res = ex.run_scaling_study(cfg, store)
    assert [s for s, _ in res.series] == [2.0, 4.0, 8.0]
    assert set(res.extras["gaps"]) == {"periodic-zero_flux", "periodic-free", "zero_flux-free"}
    assert len(res.extras["successive"]) == 2
    assert store.get("free", 4.0, 0).domain.bc == "free"
    # the extrapolated value sits beyond the last estimate in the direction of approach
    v = res.extras["sigma"]["periodic"]
    assert (res.extras["sigma_star"] - v[-1]) * (v[-1] - v[-2]) >= 0


def test_richardson_degenerate_cases():
    assert ex.richardson([1, 2, 4], [3.0, 2.0, 1.5], [], 1.0) == 1.5
    assert ex.richardson([1, 2, 4], [3.0, 2.0, 1.5], [1.0, 0.5], 1.0) == pytest.approx(1.0)


def test_rescale_identity_and_doubling():
    dom = DomainSpec(2, 4.0, 32)
    u = stripes(dom, 16, 2)
    assert ex.rescale_charge(u, 1) == u
    v = ex.rescale_charge(u, 2)
    assert v.domain.L == 8.0 and v.domain.N == 64 and v.mean == u.mean
    with pytest.raises(ConfigError):
        ex.rescale_charge(u, 0)


def test_flat_control_has_no_decay_exponent():
    dom = DomainSpec(2, 16.0, 128)
    res = ex.run_decay_profile(ex.RunConfig(heights=(1.0, 2.0, 4.0, 8.0)), constant(dom))
    assert "fit_error" in res.extras and res.exponent is None
    assert not res.passes["far_field_exponent"]
    assert np.allclose([v for _, v in res.series], 1.0)


def test_studies_need_a_candidate():
    cfg = ex.RunConfig()
    for fn in (ex.run_decay_profile, ex.run_equipartition_study, ex.run_local_energy_profile):
        with pytest.raises(NotFoundError):
            fn(cfg)


def test_equipartition_on_cosine_stripes():
    dom = DomainSpec(2, 32.0, 256)
    u = cosine_stripes(dom, 64)
    res = ex.run_equipartition_study(ex.RunConfig(l=(4.0, 8.0, 16.0)), u)
    a, b = res.extras["interfacial"], res.extras["field"]
    assert len(a) == len(b) == 3 and all(x >= 0 for x in a + b)
    assert res.passes["imbalance_decreases"]


def test_local_energy_of_stripe():
    est = sigma_estimate("periodic", 16.0, budget=0)
    res = ex.run_local_energy_profile(ex.RunConfig(l=(4.0, 8.0)), est.candidate, sigmas=None)
    assert [s for s, _ in res.series] == [4.0, 8.0]
    assert all(np.isfinite(v) for _, v in res.series)


def test_gamma_flux_balances():
    est = sigma_estimate("periodic", 16.0, budget=0)
    from chargelab.spectral import PotentialField
    pf = PotentialField.from_charge(est.candidate)
    g = ex.gamma_flux(pf, 4.0)
    assert g.domain.L == 4.0 and g.domain.bc == "flux"
    assert np.isfinite(g.total_flux)


def test_harness_report_lines():
    rep = ex.HarnessReport()
    rep.add("a", True, 0.5)
    rep.add("b", False, None, "error: x")
    assert rep.lines() == ["PASS a margin=5.000e-01", "FAIL b error: x"]
    assert not rep.ok


def test_quick_harness_passes():
    rep = ex.run_check_harness(ex.RunConfig(seeds=(1,)), quick=True)
    assert rep.ok, rep.lines()
    names = [c[0] for c in rep.checks]
    assert names == ["orthogonality", "hardy", "normal flux", "trace", "building block scaling"]


def test_basic_inequalities_on_small_table():
    Ls = (2.0, 4.0, 8.0)
    # the table feeds restrictions and tilings across scales, which the comparisons rely on
    est = ex.run_scaling_study(ex.RunConfig(L=Ls, budget=0)).estimates
    rows, Cvi = ex.basic_inequalities(est, Ls)
    assert Cvi >= 0
    bad = [(n, m) for n, m in rows if m < -1e-6]
    assert not bad, bad


def test_volume_audit_small():
    a = ex.volume_audit(np.random.default_rng(0), trials=20)
    assert a["trials"] == 20 and a["mean_quanta"] <= 1.0 and a["C"] <= 2 * 4.0
