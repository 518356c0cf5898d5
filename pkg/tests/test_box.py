import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chargelab import box
from chargelab.box import (BoxGrid, DiscreteField, FluxData, FluxModes, building_block_bound,
                           field_energy_box, field_energy_box_values, harmonic_building_block,
                           hardy_check, normal_flux_check, normal_flux_parts, orthogonality_residual,
                           overrelaxed_solve, random_band_limited, solve_potential, trace_check,
                           trace_terms)
from chargelab.domain import ChargeDensity, DomainSpec, stripes
from chargelab.errors import (ConvergenceError, InfeasibleError, InvalidInputError,
                              PreconditionError)

from oracles import nodal_stiffness


@pytest.mark.parametrize("d,N,M,L", [(2, 4, 4, 1.0), (2, 6, 4, 1.5), (3, 4, 4, 1.0)])
def test_stiffness_matches_loop_assembly(d, N, M, L):
    grid = BoxGrid(DomainSpec(d, L, N, M))
    K, shape = nodal_stiffness(d, N, M, L)
    assert grid.shape == shape
    assert np.allclose(grid.stiffness.toarray(), K, atol=1e-14)


def test_affine_potential_is_exact():
    dom = DomainSpec(2, 4.0, 16, bc="flux")
    # v = x_d: b = -e_d, outward flux b.nu = -1 on top, 0 laterally
    g = FluxData.from_faces(dom, {"top": -np.ones(17)})
    v0, e = overrelaxed_solve(g)
    z = v0.grid.coords(1)
    assert np.allclose(v0.values, np.broadcast_to(z, v0.values.shape), atol=1e-10)
    assert e == pytest.approx(0.5 * dom.L ** 2, rel=1e-10)
    assert np.all(v0.values[:, 0] == 0)


def test_overrelaxed_zero_and_scaling():
    dom = DomainSpec(2, 2.0, 16, bc="flux")
    v0, e = overrelaxed_solve(FluxData.zero(dom))
    assert e == 0 and np.all(v0.values == 0)
    rng = np.random.default_rng(0)
    g = FluxData.from_function(dom, lambda p, n: rng.normal(size=p.shape[:-1]))
    _, e1 = overrelaxed_solve(g)
    _, e3 = overrelaxed_solve(g.scaled(3.0))
    assert e3 == pytest.approx(9 * e1, rel=1e-10)


def test_overrelaxed_minimal_among_extensions():
    # the over-relaxed potential minimizes energy among fields with the same Gamma flux
    dom = DomainSpec(2, 4.0, 16, bc="flux")
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = DiscreteField.random_divergence_free(dom, rng)
        v0, e0 = overrelaxed_solve(FluxData.from_field(b))
        assert e0 <= b.energy() * (1 + 1e-10)


def test_flux_data_guards():
    dom = DomainSpec(2, 2.0, 8, bc="flux")
    with pytest.raises(InvalidInputError):
        FluxData(dom, np.ones((9, 9)))  # bottom interior nodes are not on Gamma
    with pytest.raises(InvalidInputError):
        FluxData.from_faces(dom, {"side": np.ones(9)})
    with pytest.raises(InvalidInputError):
        FluxData.from_faces(dom, {"top": np.ones(5)})
    g = FluxData.from_faces(dom, {"x0-": np.ones(9), "top": np.ones(9)})
    assert g.total_flux == pytest.approx(2 * dom.L)


def test_pure_neumann_must_balance():
    dom = DomainSpec(2, 2.0, 8)
    grid = BoxGrid(dom)
    F = np.zeros(grid.shape)
    F[0, 0] = 1.0
    with pytest.raises(InfeasibleError):
        solve_potential(grid, F)


def test_convergence_error_reports_residual():
    dom = DomainSpec(2, 4.0, 32, bc="flux")
    rng = np.random.default_rng(2)
    g = FluxData.from_function(dom, lambda p, n: rng.normal(size=p.shape[:-1]))
    with pytest.raises(ConvergenceError) as info:
        solve_potential(g.grid, g.nodal, dirichlet=g.grid.bottom_mask, maxiter=2)
    assert info.value.residual > 0 and info.value.iterations <= 2


def test_cg_residuals_decrease():
    dom = DomainSpec(2, 4.0, 16, bc="flux")
    rng = np.random.default_rng(3)
    g = FluxData.from_function(dom, lambda p, n: rng.normal(size=p.shape[:-1]))
    pot, _ = overrelaxed_solve(g, record=True)
    quad = [q for _, _, q in pot.solve.history]
    # the CG functional is monotone even where the residual is not
    assert all(b <= a + 1e-12 for a, b in zip(quad, quad[1:]))
    assert pot.solve.residual <= 1e-10


def test_class_inclusion_of_box_energies():
    dom = DomainSpec(2, 4.0, 32, bc="zero_flux")
    u = stripes(dom, 16, 3)
    _, ef = field_energy_box(u.with_domain(dom.with_bc("free")), "free")
    _, e0 = field_energy_box(u, "zero_flux")
    fx = dom.with_bc("flux")
    _, eg = field_energy_box(u.with_domain(fx), "flux", FluxData.zero(fx))
    assert 0 < ef <= e0 * (1 + 1e-10)
    assert eg == pytest.approx(e0, rel=1e-8)
    with pytest.raises(InfeasibleError):
        field_energy_box_values(dom, np.ones(32), "zero_flux")
    with pytest.raises(InvalidInputError):
        field_energy_box(u.with_domain(fx), "flux")


def test_stream_candidate_upper_bounds_zero_flux():
    L = 4.0
    dom = DomainSpec(2, L, 64, bc="zero_flux")
    R = L / 2

    def psi(X, Z):
        r = np.sqrt(X * X + Z * Z)
        return np.where(r < R, r - R, 0.0)

    b = DiscreteField.from_stream(dom, psi)
    grid = b.grid
    assert b.interior_divergence() <= 1e-8
    gam = FluxData.from_field(b)
    assert np.max(np.abs(gam.nodal)) <= 1e-8
    # bottom flux is sign x at the nodes away from x = 0 (facet averages of x/r = sign x)
    bn = b.bottom_normal()
    x = grid.coords(0)
    inner = (np.abs(x) > 1e-9) & (np.abs(x) < L / 2 - 1e-9)
    assert np.allclose(bn[inner], np.sign(x[inner]), atol=1e-12)
    assert b.energy() == pytest.approx(np.pi * L ** 2 / 16, rel=0.02)
    u = ChargeDensity(dom, np.where(dom.cell_centers() < 0, -1, 1))
    _, e0 = field_energy_box(u, "zero_flux")
    assert e0 <= b.energy()


def test_orthogonality_identity():
    dom = DomainSpec(2, 4.0, 32)
    rng = np.random.default_rng(4)
    for _ in range(5):
        b = DiscreteField.random_divergence_free(dom, rng)
        assert b.interior_divergence() < 1e-10
        assert orthogonality_residual(b) <= 1e-8
    # b = -grad v0 exactly
    fx = dom.with_bc("flux")
    g = FluxData.from_function(fx, lambda p, n: np.cos(p[..., 0]))
    v0, _ = overrelaxed_solve(g)
    assert orthogonality_residual(v0.field(), v0) <= 1e-8


def test_orthogonality_rejects_divergent_field():
    dom = DomainSpec(2, 4.0, 32)
    b = DiscreteField.random_divergence_free(dom, np.random.default_rng(5))
    comps = list(b.comps)
    bump = np.zeros_like(comps[0])
    bump[10, 10] = 1e-2 * 0.125
    comps[0] = comps[0] + bump / b.grid.spacing[0]
    with pytest.raises(PreconditionError):
        orthogonality_residual(DiscreteField(dom, tuple(comps)))


def test_building_block():
    cell = DomainSpec(2, 1.0, 16)
    v, e = harmonic_building_block(np.zeros(16), cell)
    assert e == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(InfeasibleError):
        harmonic_building_block(np.ones(16), cell)
    # half/half energy is order one and resolution stable
    es = []
    for n in (8, 16, 32):
        c = DomainSpec(2, 1.0, n)
        es.append(harmonic_building_block(np.where(c.cell_centers() < 0, 1.0, -1.0), c)[1])
    assert max(es) / min(es) <= 1.2
    # doubling lambda at p = 2 doubles the bound; the energy grows no faster
    big = DomainSpec(2, 2.0, 32)
    data = np.where(big.cell_centers() < 0, 1.0, -1.0)
    e2 = harmonic_building_block(data, big)[1]
    b1 = building_block_bound(np.where(cell.cell_centers() < 0, 1.0, -1.0), cell, 2.0)
    assert building_block_bound(data, big, 2.0) == pytest.approx(2 * b1 * 2)  # data integral doubles too
    assert e2 / es[1] <= building_block_bound(data, big, 2.0) / b1 * 1.2


def test_normal_flux_single_mode():
    for n in ([1], [2], [1, 2]):
        modes = FluxModes("easy", len(n) + 1, [n], [1.3])
        k = np.sqrt(np.sum(np.square(n)))
        assert normal_flux_check(modes) == pytest.approx(1 / np.cosh(np.pi * k) ** 2, rel=1e-12)
    with pytest.raises(InvalidInputError):
        FluxModes("easy", 2, np.zeros((0, 1)), [])
    with pytest.raises(InvalidInputError):
        normal_flux_check(FluxModes("easy", 2, [[1]], [0.0]))


def test_normal_flux_hard_case_cross_terms():
    rng = np.random.default_rng(6)
    for _ in range(10):
        modes = box.random_flux_modes(rng, 3, 4, case="hard")
        normal_flux_check(modes, verify=True)  # raises on a cross-term mismatch
        out, rest = normal_flux_parts(modes)
        assert out >= 0 and rest > 0


def test_hardy_examples():
    assert hardy_check(np.zeros(10)) == (0.0, 0.0, 0.0)
    b = np.zeros(200)
    b[0] = 1.0
    lhs, rhs, ratio = hardy_check(b)
    direct = sum(1.0 / (n + 1) ** 2 for n in range(200))
    assert lhs == pytest.approx(direct, abs=1e-12)
    assert ratio == pytest.approx(1.6399, abs=1e-4)
    with pytest.raises(InvalidInputError):
        hardy_check([1.0, -1.0])


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=60))
def test_hardy_bound_property(b):
    assert hardy_check(b)[2] <= 4 + 1e-9


def test_hardy_bound_small_lengths_scan():
    # sup of the quadratic form on short lengths: top eigenvalue of the Hardy matrix
    for n in range(1, 13):
        A = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
        assert np.linalg.eigvalsh(A.T @ A).max() < 4


def test_trace_examples():
    dom = DomainSpec(2, 4.0, 16)
    grid = BoxGrid(dom)
    lhs, rhs, slack = trace_check(np.zeros(grid.shape), dom, 0.5, 1.0)
    assert lhs == 0 and rhs == 0 and slack == 0
    lhs, br = trace_terms(np.ones(grid.shape), dom, 1.0)
    assert lhs == pytest.approx(np.sqrt(dom.L)) and br == pytest.approx(np.sqrt(dom.L))
    assert trace_check(np.ones(grid.shape), dom, 1.0, 1.0)[2] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        trace_terms(np.ones(grid.shape), dom, 0.0)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1 / 16, 1 / 4, 1.0]))
def test_trace_bound_with_unit_constant(seed, eps):
    # C = 1.2 (the calibrated value) covers random band-limited inputs
    dom = DomainSpec(2, 4.0, 16)
    w = random_band_limited(dom, np.random.default_rng(seed))
    assert trace_check(w, dom, eps, 1.2)[2] >= 0


def test_potential_csv(tmp_path):
    dom = DomainSpec(2, 1.0, 4, bc="flux")
    v0, _ = overrelaxed_solve(FluxData.from_faces(dom, {"top": -np.ones(5)}))
    v0.to_csv(tmp_path / "v.csv")
    data = np.loadtxt(tmp_path / "v.csv", delimiter=",", skiprows=1)
    assert data.shape == (25, 3)
    assert np.allclose(data[:, 2], data[:, 1], atol=1e-10)


def test_normal_flux_forms_reproduce_parts():
    rng = np.random.default_rng(9)
    for _ in range(50):
        modes = box.random_flux_modes(rng, int(rng.choice([2, 3])), 8)
        A, B = box.normal_flux_forms(modes)
        c = modes.amplitudes
        out, rest = normal_flux_parts(modes)
        assert c @ A @ c == pytest.approx(out, rel=1e-12, abs=1e-300)
        assert c @ B @ c == pytest.approx(rest, rel=1e-12)
        # the sampled ratio never beats the worst amplitudes on the same index set
        assert normal_flux_check(modes) <= box.normal_flux_worst(modes) * (1 + 1e-12)
