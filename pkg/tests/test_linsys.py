"""Linearisation assembly and modal decomposition checks."""

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from filmctl.core import ActuatorBank, FilmState, Grid, ObserverBank, PhysicalParams, nusselt_state
from filmctl.linsys import (
    ControllabilityError,
    fourier_blocks,
    growth_rates,
    linearize,
    modal_decompose,
    modal_decompose_groups,
    rank_modes,
    real_fourier_basis,
)
from filmctl.wrmodel import ControlField, wr_rhs

HEADLINE = PhysicalParams(reynolds=11.29, capillary=0.05)
STABLE = PhysicalParams(reynolds=0.3, capillary=0.05)


def build(params=HEADLINE, n=64, m=5, p=5):
    g = Grid(n, params.length)
    act = ActuatorBank.evenly_spaced(m, params)
    obs = ObserverBank.evenly_spaced(p, params, g)
    return linearize(params, g, act, obs), g, act, obs


def match_sets(lhs, rhs, tol):
    """Assert two complex multisets agree via optimal assignment."""
    assert len(lhs) == len(rhs)
    cost = np.abs(lhs[:, None] - rhs[None, :])
    r, c = linear_sum_assignment(cost)
    assert cost[r, c].max() < tol


class TestAssembly:
    def test_jacobian_against_finite_differences(self):
        sys, g, act, obs = build(n=32)
        n = g.n_nodes
        base = nusselt_state(g)
        f0 = ControlField.zero(g)
        eps = 1e-6

        def rhs_vec(xi):
            st = FilmState(h=1.0 + xi[:n], q=2.0 / 3.0 + xi[n:])
            dh, dq = wr_rhs(st, f0, HEADLINE)
            return np.concatenate([dh, dq])

        jac = np.zeros((2 * n, 2 * n))
        for j in range(2 * n):
            e = np.zeros(2 * n)
            e[j] = eps
            jac[:, j] = (rhs_vec(e) - rhs_vec(-e)) / (2 * eps)
        scale = np.abs(sys.a).max()
        assert np.abs(jac - sys.a).max() / scale < 1e-5

    def test_mass_mode_row(self):
        # k = 0: interface row couples to f only, neutral in h
        blocks = fourier_blocks(HEADLINE, Grid(64, 30.0))
        np.testing.assert_allclose(blocks[0, 0, :], [0.0, 0.0], atol=1e-14)

    def test_b_structure(self):
        sys, g, act, _ = build(n=64)
        shapes = act.shapes(g)
        n = g.n_nodes
        np.testing.assert_allclose(sys.b[:n, :], shapes.T, atol=1e-14)
        np.testing.assert_allclose(sys.b[n:, :], shapes.T / 3.0, atol=1e-14)

    def test_c_unit_rows(self):
        sys, g, _, obs = build(n=64)
        assert sys.c.shape == (5, 2 * g.n_nodes)
        np.testing.assert_array_equal(np.sum(sys.c != 0, axis=1), np.ones(5))
        np.testing.assert_allclose(np.sum(sys.c, axis=1), np.ones(5))
        # all unit entries live on the interface block
        assert np.abs(sys.c[:, g.n_nodes:]).max() == 0.0

    def test_cost_matrices(self):
        sys, g, _, _ = build(n=64)
        n = g.n_nodes
        rng = np.random.default_rng(0)
        hhat = rng.standard_normal(n)
        xi = np.concatenate([hhat, rng.standard_normal(n)])
        quad = xi @ sys.u @ xi
        assert quad == pytest.approx(HEADLINE.beta * HEADLINE.length / n * np.sum(hhat**2), rel=1e-12)
        np.testing.assert_allclose(sys.v, 0.5 * np.eye(5), atol=1e-14)
        assert np.min(np.linalg.eigvalsh(sys.v)) > 0

    def test_translation_commutation(self):
        sys, g, _, _ = build(n=32)
        n = g.n_nodes
        shift = np.roll(np.eye(n), 1, axis=0)
        s2 = np.block([[shift, np.zeros((n, n))], [np.zeros((n, n)), shift]])
        comm = s2 @ sys.a - sys.a @ s2
        assert np.abs(comm).max() < 1e-9 * np.abs(sys.a).max()


class TestSpectrum:
    def test_blockwise_matches_dense(self):
        sys, g, _, _ = build(n=64)
        blocks = sys.blocks
        blockwise = np.concatenate(
            [np.linalg.eigvals(blocks[n]) for n in range(blocks.shape[0])]
            + [np.linalg.eigvals(blocks[n]).conj() for n in range(1, blocks.shape[0] - 1)]
        )
        dense = np.linalg.eigvals(sys.a)
        match_sets(np.sort_complex(blockwise), np.sort_complex(dense), 1e-8)

    def test_growth_rate_peak_equals_abscissa(self):
        sys, g, _, _ = build(n=64)
        rates = growth_rates(HEADLINE, g)
        dense = np.max(np.linalg.eigvals(sys.a).real)
        assert np.max(rates) == pytest.approx(dense, abs=1e-10)

    def test_unstable_count_headline(self):
        sys, _, _, _ = build(n=128)
        ev = np.linalg.eigvals(sys.a)
        assert int(np.sum(ev.real > 1e-10)) == 8

    def test_resolved_subspace(self):
        sys, g, _, _ = build(n=64)
        e = sys.resolved_basis
        np.testing.assert_allclose(e.T @ e, np.eye(e.shape[1]), atol=1e-12)
        # invariance: A maps the resolved subspace into itself
        resid = sys.a @ e - e @ (e.T @ sys.a @ e)
        assert np.abs(resid).max() < 1e-9
        # deflation removes exactly the two sawtooth directions
        assert e.shape == (2 * g.n_nodes, 2 * g.n_nodes - 2)

    def test_real_fourier_basis_shape(self):
        e = real_fourier_basis(16)
        assert e.shape == (16, 15)
        np.testing.assert_allclose(e.T @ e, np.eye(15), atol=1e-13)


class TestModal:
    def test_ranking_headline(self):
        sys, _, _, _ = build(n=64)
        groups = rank_modes(sys)
        assert [g.n for g in groups[:4]] == [2, 1, 3, 4]
        assert groups[0].eigenvalue.real == pytest.approx(0.0684447772834, abs=1e-10)
        # mass mode ranks right after the unstable quartet
        assert groups[4].n == 0
        assert groups[4].eigenvalue.real == pytest.approx(0.0, abs=1e-12)

    def test_stable_regime_two_slowest(self):
        sys, _, _, _ = build(params=STABLE, n=64)
        md = modal_decompose_groups(sys, 2)
        # slowest two groups: the neutral mass mode plus the slowest wave pair;
        # everything retained except the mass mode decays
        rates = np.sort(np.linalg.eigvals(md.a_u).real)
        assert rates[-1] == pytest.approx(0.0, abs=1e-12)
        assert np.all(rates[:-1] < 0)
        assert md.m_z == 3

    def test_retain_below_unstable_raises(self):
        sys, _, _, _ = build(n=64)
        with pytest.raises(ControllabilityError):
            modal_decompose(sys, 4)

    def test_pair_split_adjusts(self):
        sys, _, _, _ = build(params=STABLE, n=64)
        md = modal_decompose(sys, 2)
        assert md.adjusted
        assert md.m_z == 3
        md3 = modal_decompose(sys, 3)
        assert not md3.adjusted
        assert md3.m_z == 3

    def test_retained_eigenvalues_match_dense_top(self):
        sys, _, _, _ = build(n=64)
        md = modal_decompose(sys, 9)
        assert md.m_z == 9
        got = np.linalg.eigvals(md.a_u)
        dense = np.linalg.eigvals(sys.a)
        # drop the sawtooth zero, which modal ranking excludes by construction
        order = np.argsort(-dense.real)
        top = dense[order]
        # two zeros (mass + sawtooth) tie; keep nine values matching the
        # retained set as a multiset
        match_sets(np.sort_complex(got), np.sort_complex(top[:9]), 1e-8)

    def test_round_trip(self):
        sys, _, _, _ = build(n=64)
        md = modal_decompose(sys, 9)
        np.testing.assert_allclose(md.restrict @ md.prolong, np.eye(md.m_z), atol=1e-10)
        rng = np.random.default_rng(5)
        z = rng.standard_normal(md.m_z)
        np.testing.assert_allclose(md.restrict @ (md.prolong @ z), z, atol=1e-10)

    def test_reduced_matrices_consistent(self):
        sys, _, _, _ = build(n=64)
        md = modal_decompose(sys, 9)
        np.testing.assert_allclose(md.a_u, md.restrict @ sys.a @ md.prolong, atol=1e-10)
        np.testing.assert_allclose(md.b_u, md.restrict @ sys.b, atol=1e-12)
        np.testing.assert_allclose(md.sampling, sys.c @ md.prolong, atol=1e-12)

    def test_unstable_counts_logged(self):
        sys, _, _, _ = build(n=64)
        md = modal_decompose(sys, 9)
        assert md.n_unstable_dims == 8
        assert md.n_unstable_groups == 4

    def test_stable_complement_untouched_by_modal_feedback(self):
        # feedback through b as a function of retained coordinates leaves the
        # non-retained eigenvalues exactly where they were
        sys, _, _, _ = build(n=32)
        md = modal_decompose(sys, 9)
        rng = np.random.default_rng(6)
        ktilde = 0.1 * rng.standard_normal((sys.b.shape[1], md.m_z))
        closed = sys.a + sys.b @ ktilde @ md.restrict
        ev_closed = np.linalg.eigvals(closed)
        ev_open = np.linalg.eigvals(sys.a)
        retained = np.linalg.eigvals(md.a_u)
        # remove the retained eigenvalues from the open spectrum, then demand
        # the remainder reappears in the closed spectrum
        open_left = list(ev_open)
        for lam in retained:
            j = int(np.argmin(np.abs(np.array(open_left) - lam)))
            open_left.pop(j)
        for lam in open_left:
            assert np.min(np.abs(ev_closed - lam)) < 1e-7
