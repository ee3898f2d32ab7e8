import numpy as np
import pytest

from volterra_smp.bsee import assemble_adjoints
from volterra_smp.bsvie import (BSVIEFirstTuple, bsee_to_bsvie_first, bsee_to_bsvie_second,
                                bsvie_residual_first, bsvie_residual_second,
                                m_constraint_residual_first, reconstruct_first_field,
                                reconstruct_second_field)
from volterra_smp.coefficients import ControlPath, make_problem
from volterra_smp.kernels import constant_kernel, exponential_kernel
from volterra_smp.simulate import sample_brownian, simulate_sve


@pytest.fixture(scope="module", params=["constant", "exponential"])
def kernel0(request):
    return constant_kernel(alpha=0.0) if request.param == "constant" \
        else exponential_kernel(2.0, alpha=0.0)


def solve(problem, kernel, grid, ens, u_val=0.3, xi=0.4, **kw):
    uh = ControlPath.constant(u_val, grid)
    xh = simulate_sve(problem, uh, kernel, xi, ens)
    adj = assemble_adjoints(problem, uh, xh, kernel, ens, tol=1e-13, **kw)
    return uh, xh, adj


def test_first_bridge_deterministic_oracle(grid, lq, kernel0, ens):
    uh, xh, adj = solve(lq, kernel0, grid, ens)
    tup = bsee_to_bsvie_first(adj, kernel0)
    assert tup.deterministic
    assert np.all(tup.q1 == 0.0)
    res = bsvie_residual_first(tup, lq, uh, kernel0, ens)
    assert res["res_line1"] <= 1e-8
    assert res["res_line2"] <= 1e-8


def test_first_bridge_roundtrip(grid, lq, kernel0, ens):
    uh, xh, adj = solve(lq, kernel0, grid, ens)
    tup = bsee_to_bsvie_first(adj, kernel0)
    rec = reconstruct_first_field(tup, kernel0, grid)
    assert np.max(np.abs(rec - adj.first.P0[:, :, 0])) <= 1e-8


def test_first_bridge_zero_problem(grid, kernel0, ens):
    pr = make_problem("zero")
    uh, xh, adj = solve(pr, kernel0, grid, ens, xi=0.0)
    tup = bsee_to_bsvie_first(adj, kernel0)
    assert np.max(np.abs(tup.p1_0)) == 0.0
    assert np.max(np.abs(tup.p2_0)) == 0.0


def test_first_bridge_rejects_singular_kernel(grid, lq, frac_kernel, ens):
    uh, xh, adj = solve(lq, frac_kernel, grid, ens)
    with pytest.raises(ValueError, match="regular kernel"):
        bsee_to_bsvie_first(adj, frac_kernel)
    tup = bsee_to_bsvie_first(adj, frac_kernel, allow_singular=True)
    res = bsvie_residual_first(tup, lq, uh, frac_kernel, ens)
    assert res["res_line2"] <= 1e-8  # same discrete algebra, caveat documented


def test_first_bridge_perturbation_probe(grid, lq, kernel0, ens):
    uh, xh, adj = solve(lq, kernel0, grid, ens)
    tup = bsee_to_bsvie_first(adj, kernel0)
    res0 = bsvie_residual_first(tup, lq, uh, kernel0, ens)
    bad = BSVIEFirstTuple(grid=grid, p1_0=tup.p1_0, p2_0=tup.p2_0 * 1.01, q1=tup.q1)
    res1 = bsvie_residual_first(bad, lq, uh, kernel0, ens)
    assert res1["res_line2"] > 10 * max(res0["res_line2"], 1e-14)


def test_first_bridge_affine_regime(grid, state_free, kernel0, ens):
    uh, xh, adj = solve(state_free, kernel0, grid, ens, u_val=0.2, xi=0.2)
    tup = bsee_to_bsvie_first(adj, kernel0)
    assert not tup.deterministic
    res = bsvie_residual_first(tup, state_free, uh, kernel0, ens)
    assert res["res_line1"] <= 1e-8
    assert res["res_line2"] <= 1e-8
    assert m_constraint_residual_first(tup, ens) <= 1e-8


def test_q2_time_slice_constant_under_zero_coupling(grid, state_free, ens):
    # with a constant kernel and no couplings the martingale integrand of
    # p2(s) inherits a vol table independent of s: q2(s, t) = p2_1(s) vol(t)
    k = constant_kernel(alpha=0.0)
    uh, xh, adj = solve(state_free, k, grid, ens, u_val=0.2, xi=0.2)
    tup = bsee_to_bsvie_first(adj, k)
    assert tup.p2_1 is not None and np.all(tup.p2_1 == tup.p2_1[0])


def test_second_bridge_quadratic_h_oracle(grid, state_free, ens):
    k = constant_kernel(alpha=0.0)
    uh, xh, adj = solve(state_free, k, grid, ens, u_val=0.2, xi=0.2)
    tup2 = bsee_to_bsvie_second(state_free, adj, k, ens, r_subgrid=8)
    # terminal Hessian is the constant h2 = 1.2
    assert np.allclose(tup2.P1, -1.2)
    res = bsvie_residual_second(tup2, state_free, adj, k)
    assert max(res.values()) <= 1e-8
    rec = reconstruct_second_field(tup2, k)
    assert np.max(np.abs(rec - adj.second.P[:, :, :, 0, 0])) <= 1e-8


def test_second_bridge_subgrid_validation(grid, state_free, ens):
    k = constant_kernel(alpha=0.0)
    uh, xh, adj = solve(state_free, k, grid, ens, u_val=0.2, xi=0.2)
    with pytest.raises(ValueError, match="at least 4"):
        bsee_to_bsvie_second(state_free, adj, k, ens, r_subgrid=3)


def test_second_bridge_coupled_consistency_order(bilinear):
    # with drift coupling the pair-level identities mix terminal-point and
    # step-integrated kernel scales: residuals shrink linearly with dt
    from volterra_smp.grids import TimeGrid
    k = exponential_kernel(1.5, alpha=0.0)
    vals = []
    for n in (64, 128):
        grid = TimeGrid(1.0, n)
        e = sample_brownian(grid, 100, 9)
        uh = ControlPath.constant(0.3, grid)
        xh = simulate_sve(bilinear, uh, k, 0.4, e)
        adj = assemble_adjoints(bilinear, uh, xh, k, e, tol=1e-13, lsmc=True)
        tup2 = bsee_to_bsvie_second(bilinear, adj, k, e, r_subgrid="full")
        res = bsvie_residual_second(tup2, bilinear, adj, k)
        assert max(res["res_eq1"], res["res_eq2"], res["res_eq4"]) <= 1e-10
        rec = reconstruct_second_field(tup2, k)
        vals.append((res["res_eq3"],
                     float(np.max(np.abs(rec - adj.second.P[:, :, :, 0, 0])))))
    assert vals[1][0] < 0.7 * vals[0][0]
    assert vals[1][1] < 0.7 * vals[0][1]


def test_second_bridge_zero_problem(grid, ens):
    k = constant_kernel(alpha=0.0)
    pr = make_problem("zero")
    uh, xh, adj = solve(pr, k, grid, ens, xi=0.0)
    tup2 = bsee_to_bsvie_second(pr, adj, k, ens, r_subgrid=4)
    assert np.max(np.abs(tup2.P1)) == 0.0
    assert np.max(np.abs(tup2.P2)) == 0.0
    assert np.max(np.abs(tup2.P3)) == 0.0
    res = bsvie_residual_second(tup2, pr, adj, k)
    assert max(res.values()) == 0.0
