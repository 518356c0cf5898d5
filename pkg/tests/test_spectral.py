import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chargelab.box import field_energy_box
from chargelab.domain import ChargeDensity, DomainSpec, constant, random_charge, stripes
from chargelab.errors import DomainError, InfeasibleError, InvalidInputError, WrongClassError
from chargelab.patterns import IncrementalEnergy
from chargelab.spectral import (PotentialField, SpectralKernel, field_energy_periodic,
                                field_energy_reflected, field_energy_values, green_apply,
                                max_field_profile, multiplier, reconstruct_field)


def test_multiplier_properties():
    k = np.linspace(0.0, 40.0, 401)
    m = multiplier(k, 8.0)
    assert m[0] == 4.0
    assert np.all(m > 0)
    kk = k[1:]
    gap = 1 / (2 * kk) - m[1:]
    assert np.all(gap >= 0) and np.all(np.diff(gap[5:]) <= 0)
    with pytest.raises(InvalidInputError):
        multiplier(k, 1.0, "robin")


def test_constant_charge():
    dom = DomainSpec(2, 8.0, 64)
    u = constant(dom)
    assert field_energy_periodic(u) / dom.L == pytest.approx(4.0, rel=1e-14)
    assert np.allclose(green_apply(u), dom.L)
    b = reconstruct_field(u, [[0.3, 1.0], [-2.0, 7.5]])
    assert np.allclose(b, [[0, 1], [0, 1]], atol=1e-12)


@pytest.mark.parametrize("q", [1, 3, 8])
def test_cosine_input(q):
    # u = cos(kx): per-area energy tanh(kL)/(4k)
    L, N = 4.0, 64
    dom = DomainSpec(2, L, N)
    k = 2 * np.pi * q / L
    u = np.cos(k * dom.cell_centers())
    e = field_energy_values(dom, u)
    assert e / L == pytest.approx(np.tanh(k * L) / (4 * k), rel=1e-12)


def test_stripe_pair_matches_box_oracle():
    # one +/- stripe pair per period L; the odd reflection of sign x on the box
    # of side L is exactly this torus pattern
    L, h = 4.0, 1 / 16
    N = int(L / h)
    per = DomainSpec(2, L, N)
    spectral = field_energy_values(per, np.where(per.cell_centers() < 0, -1.0, 1.0))
    box_dom = DomainSpec(2, L, N, bc="free")
    u = ChargeDensity(box_dom, np.where(box_dom.cell_centers() < 0, -1, 1))
    refl = field_energy_reflected(u, "free")
    assert refl == pytest.approx(spectral, rel=1e-12)
    _, fd = field_energy_box(u, "free")
    assert fd == pytest.approx(refl, rel=0.01)
    zf = u.with_domain(box_dom.with_bc("zero_flux"))
    _, fd0 = field_energy_box(zf, "zero_flux")
    assert fd0 == pytest.approx(field_energy_reflected(zf, "zero_flux"), rel=0.01)


def test_wrong_class_and_mean_guard():
    dom = DomainSpec(2, 2.0, 16, bc="free")
    with pytest.raises(WrongClassError):
        field_energy_periodic(constant(dom))
    with pytest.raises(InfeasibleError):
        field_energy_values(dom, np.ones(16), "zero_flux")
    with pytest.raises(InvalidInputError):
        SpectralKernel(dom, "other")


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 3]))
def test_green_apply_parseval(seed, d):
    dom = DomainSpec(d, 4.0, 64 if d == 2 else 16)
    u = random_charge(dom, np.random.default_rng(seed))
    phi = green_apply(u)
    e = 0.5 * np.sum(u.as_float() * phi) * dom.cell_area
    assert e == pytest.approx(field_energy_periodic(u), rel=1e-10)
    assert np.allclose(green_apply(u.flipped()), -phi)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_energy_lower_bound_by_mean(seed):
    dom = DomainSpec(2, 4.0, 32)
    u = random_charge(dom, np.random.default_rng(seed))
    bound = dom.L / 2 * u.mean ** 2 * dom.bottom_area
    assert field_energy_periodic(u) >= bound * (1 - 1e-12)


def test_mode_decay_bound():
    dom = DomainSpec(2, 4.0, 32)
    u = random_charge(dom, np.random.default_rng(3)).as_float()
    u = u - u.mean()
    K = SpectralKernel(dom)
    uh = np.fft.fft(u) / dom.N
    nz = K.kabs > 0
    c2 = np.abs(uh[nz]) ** 2
    assert np.all(K.multipliers[nz] * c2 <= c2 / (2 * K.kabs[nz]) + 1e-15)


def test_dense_matrix_matches_apply():
    for bc in ("periodic", "free", "zero_flux"):
        dom = DomainSpec(2, 2.0, 16, bc=bc)
        mode = bc
        K = SpectralKernel(dom, mode)
        G = K.matrix()
        rng = np.random.default_rng(0)
        x = rng.normal(size=16)
        if bc == "zero_flux":
            x -= x.mean()
        assert np.allclose(G, G.T)
        assert np.allclose(G @ x, K.apply(x))
        assert 0.5 * x @ G @ x * dom.cell_area == pytest.approx(K.energy(x), rel=1e-10)


def test_incremental_drift_after_many_flips():
    dom = DomainSpec(2, 4.0, 32)
    rng = np.random.default_rng(5)
    st_ = IncrementalEnergy(random_charge(dom, rng), recompute_every=10 ** 9)
    for _ in range(10_000):
        cells = np.array([rng.integers(dom.n_cells)])
        st_.apply(cells, *st_.delta(cells))
    assert st_.drift() <= 1e-8


def test_potential_field_contract():
    dom = DomainSpec(2, 4.0, 32)
    u = stripes(dom, 16, 5)
    pf = PotentialField.from_charge(u)
    v, b = pf.on_grid([0.0, dom.L])
    # top Dirichlet and bottom flux reproduce u at cell centres
    assert np.allclose(v[:, 1], 0.0, atol=1e-12)
    assert np.allclose(b[1][:, 0], u.values, atol=1e-10)
    assert np.allclose(b[0][:, 1], 0.0, atol=1e-12)
    # pointwise evaluation agrees with the lattice evaluation
    pts = np.column_stack([dom.cell_centers()[:5], np.full(5, 0.7)])
    vp, bp = pf.at_points(pts)
    vg, bg = pf.on_grid([0.7])
    assert np.allclose(vp, vg[:5, 0]) and np.allclose(bp[:, 1], bg[1][:5, 0])
    with pytest.raises(DomainError):
        pf.at_points([[0.0, 0.0]])
    with pytest.raises(DomainError):
        max_field_profile(u, [5.0])


def test_field_profile_constant():
    dom = DomainSpec(2, 8.0, 64)
    assert np.allclose(max_field_profile(constant(dom), [1, 2, 4, 8]), 1.0)
