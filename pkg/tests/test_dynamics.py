import datetime as dt

import numpy as np
import pytest

from tll.dtl import JumpGrid
from tll.dynamics import (
    FactorModel,
    IncrementError,
    detl_drift,
    dtl_drift,
    pca,
    project_dtl_constraints,
    select_top_indices,
    support_slice,
    to_alpha_hat,
    to_relative_maturity,
)

TRADE = dt.date(2020, 1, 6)


class FakeSurface:
    """Smooth surface stub: kappa(tau, x) = level * exp(-|x|) * (1+tau)."""

    def __init__(self, level, taus=(0.1, 0.5, 1.0), x=np.linspace(-0.3, 0.1, 5)):
        self.level = level
        self._taus = list(taus)
        self.x = np.asarray(x)

    def maturities(self):
        return self._taus

    def kappa(self, taus):
        taus = np.atleast_1d(np.asarray(taus, float))
        return (self.level * np.exp(-np.abs(self.x))[None, :]
                * (1.0 + taus)[:, None])


def fake_eval(surface, tau):
    return surface.kappa(np.array([tau]))[0]


class TestToRelativeMaturity:
    def test_identical_surfaces_zero_increments(self):
        surfs = [FakeSurface(1.0) for _ in range(4)]
        dates = [TRADE + dt.timedelta(days=i) for i in range(4)]
        panel = to_relative_maturity(dates, surfs, [0.2, 0.6],
                                     surfs[0].x, fake_eval)
        assert np.allclose(panel.increments, 0.0)
        assert panel.values.shape == (4, 2, 5)

    def test_drops_unsupported_maturity(self):
        surfs = [FakeSurface(1.0, taus=(0.1, 0.5)) for _ in range(3)]
        dates = [TRADE + dt.timedelta(days=i) for i in range(3)]
        panel = to_relative_maturity(dates, surfs, [0.2, 0.9],
                                     surfs[0].x, fake_eval)
        assert np.allclose(panel.tau_grid, [0.2])

    def test_requires_two_days(self):
        with pytest.raises(IncrementError):
            to_relative_maturity([TRADE], [FakeSurface(1.0)], [0.2],
                                 np.array([0.0]), fake_eval)

    def test_select_top_indices(self):
        values = np.zeros((10, 4))
        values[:, 1] = 3.0
        values[:, 3] = 1.0
        assert select_top_indices(values, 2).tolist() == [1, 3]


def make_panel_from_increments(inc, tau_grid, x_grid):
    n_days = inc.shape[0] + 1
    values = np.concatenate([np.zeros((1,) + inc.shape[1:]),
                             np.cumsum(inc, axis=0)])
    from tll.dynamics import IncrementPanel
    dates = tuple(TRADE + dt.timedelta(days=i) for i in range(n_days))
    return IncrementPanel(dates, np.asarray(tau_grid, float),
                          np.asarray(x_grid, float), values)


class TestPca:
    tau_grid = [0.2, 0.6]
    x_grid = [-0.1, 0.0, 0.1]

    def test_rank_one_recovery(self):
        rng = np.random.default_rng(0)
        g = rng.random(6)
        g /= np.linalg.norm(g)
        z = rng.standard_normal(300)
        inc = np.outer(z, g).reshape(300, 2, 3)
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        model = pca(panel, m=1)
        f1 = model.factors[0].ravel()
        f1 /= np.linalg.norm(f1)
        sign_fixed = g if g[np.argmax(np.abs(g))] > 0 else -g
        assert np.allclose(f1, sign_fixed, atol=1e-10)
        assert np.all(model.eigenvalues[1:] <= 1e-10 * model.eigenvalues[0])
        assert model.explained[0] == pytest.approx(1.0, abs=1e-12)

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(1)
        inc = rng.standard_normal((400, 2, 3))
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        dt_step = 1.0 / 252
        model = pca(panel, m=6, dt=dt_step)
        flat = inc.reshape(400, -1)
        cov = np.cov(flat, rowvar=False) / dt_step
        recon = sum(np.outer(model.factors[n].ravel(),
                             model.factors[n].ravel()) for n in range(6))
        assert (np.linalg.norm(recon - cov, "fro")
                <= 1e-10 * np.linalg.norm(cov, "fro"))

    def test_subspace_recovery(self):
        # increments from 3 known orthonormal factors: principal angles
        # between recovered and true subspaces vanish
        rng = np.random.default_rng(2)
        basis = np.linalg.qr(rng.standard_normal((6, 3)))[0]
        scales = np.array([1.0, 0.5, 0.2])
        z = rng.standard_normal((5000, 3)) * scales
        inc = (z @ basis.T).reshape(5000, 2, 3)
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        model = pca(panel, m=3)
        rec = np.array([f.ravel() for f in model.factors]).T
        rec /= np.linalg.norm(rec, axis=0)
        s = np.linalg.svd(basis.T @ np.linalg.qr(rec)[0], compute_uv=False)
        angles = np.arccos(np.clip(s, -1, 1))
        assert np.max(angles) < 1e-6
        assert model.explained_fraction() >= 0.99

    def test_non_finite_increment_names_date(self):
        inc = np.zeros((5, 2, 3))
        inc[2, 0, 0] = np.nan
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        with pytest.raises(IncrementError, match="2020-01"):
            pca(panel, m=1)

    def test_json_round_trip(self):
        rng = np.random.default_rng(3)
        inc = rng.standard_normal((50, 2, 3))
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        model = pca(panel, m=2)
        back = FactorModel.from_json(model.to_json())
        assert np.allclose(back.factors, model.factors)
        assert back.model_kind == model.model_kind

    def test_beta_hat_interpolation_clamps(self):
        rng = np.random.default_rng(4)
        inc = rng.standard_normal((50, 2, 3))
        panel = make_panel_from_increments(inc, self.tau_grid, self.x_grid)
        model = pca(panel, m=1)
        onto = model.beta_hat(np.array([0.0, 0.4, 2.0]),
                              np.array(self.x_grid))
        assert np.allclose(onto[0, 0], model.factors[0, 0])
        assert np.allclose(onto[0, 2], model.factors[0, 1])
        mid = 0.5 * (model.factors[0, 0] + model.factors[0, 1])
        assert np.allclose(onto[0, 1], mid)


class TestProjectConstraints:
    x = np.array([-0.2, -0.1, 0.0, 0.1, 0.2])

    def test_satisfying_factor_unchanged(self):
        A = np.vstack([np.ones(5), np.exp(self.x) - 1.0])
        ns = np.linalg.svd(A)[2][2:]  # null space rows
        beta = ns[0][None, None, :]
        proj, dist = project_dtl_constraints(beta, self.x)
        assert np.allclose(proj, beta, atol=1e-12)
        assert dist[0] <= 1e-12

    def test_constraints_hold_after_projection(self):
        rng = np.random.default_rng(5)
        beta = rng.standard_normal((2, 3, 5))
        proj, dist = project_dtl_constraints(beta, self.x)
        assert np.all(dist > 0)
        for n in range(2):
            for i in range(3):
                assert abs(proj[n, i].sum()) <= 1e-12
                assert abs(proj[n, i] @ (np.exp(self.x) - 1.0)) <= 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        beta = rng.standard_normal((1, 2, 5))
        proj, _ = project_dtl_constraints(beta, self.x)
        again, dist = project_dtl_constraints(proj, self.x)
        assert np.allclose(again, proj, atol=1e-12)
        assert np.all(dist <= 1e-12)


class TestDetlDrift:
    def test_zero_factors(self):
        x = np.linspace(-1, 1, 101)
        betas = np.zeros((2, 3, 101))
        alpha = detl_drift(betas, 0.0, [0.0, 0.5, 1.0], x)
        assert np.allclose(alpha, 0.0)

    def test_vanishes_at_current_time(self):
        x = np.linspace(-1, 1, 201)
        betas = np.exp(-np.abs(x))[None, None, :] * np.ones((1, 2, 1))
        alpha = detl_drift(betas, 0.0, [0.0, 0.5], x)
        assert np.allclose(alpha[0], 0.0, atol=1e-14)

    def test_bilinear_scaling(self):
        rng = np.random.default_rng(7)
        x = np.linspace(-1, 1, 101)
        betas = rng.standard_normal((2, 3, 101)) * np.exp(-x**2)[None, None, :]
        a1 = detl_drift(betas, 0.0, [0.0, 0.3, 0.6], x)
        a3 = detl_drift(3.0 * betas, 0.0, [0.0, 0.3, 0.6], x)
        assert np.allclose(a3, 9.0 * a1, rtol=1e-12, atol=1e-12)

    def test_box_indicator_closed_form(self):
        # single factor, box on [-h, h], constant in T: the convolution
        # is a triangle.  Edge samples at half height keep the
        # trapezoid discretization error at O(dx).
        h, T = 0.1, 0.5
        dx = 2e-7
        x = np.arange(-0.5, 0.5 + dx / 2, dx)
        box = np.where(np.abs(x) < h - dx / 2, 1.0, 0.0)
        box[np.isclose(np.abs(x), h, atol=dx / 2)] = 0.5
        betas = np.broadcast_to(box, (1, 2, x.size)).copy()
        alpha = detl_drift(betas, 0.0, [0.0, T], x)
        tri = np.maximum(2 * h - np.abs(x), 0.0)
        exact = -(T * tri - T * box * 2 * h - box * T * 2 * h)
        assert np.max(np.abs(alpha[1] - exact)) <= 1e-6


class TestDtlDrift:
    def test_support_slice(self):
        # N=7: 1-based window [2, 6]
        assert support_slice(JumpGrid.ungrouped(7, 0.1)) == slice(1, 6)
        g301 = JumpGrid.default()
        sl = support_slice(g301)
        assert (sl.start, sl.stop) == (75, 226)

    def test_zero_factors(self):
        g = JumpGrid.ungrouped(7, 0.1)
        alpha = dtl_drift(np.zeros((2, 3, 7)), 0.0, [0.0, 0.5, 1.0], g)
        assert np.allclose(alpha, 0.0)

    def test_single_atom_hand_enumeration(self):
        # one nonzero atom k0 inside the window:
        # alpha^j = -beta^{k0} beta_bar^{j+M-k0}
        g = JumpGrid.ungrouped(7, 0.1)
        k0 = 3  # 0-based, inside [1, 5]
        b = 0.7
        T_grid = np.array([0.0, 0.4])
        betas = np.zeros((1, 2, 7))
        betas[0, :, k0] = b
        alpha = dtl_drift(betas, 0.0, T_grid, g)
        bar = b * T_grid[1]
        mi = g.center
        # beta_bar is nonzero only at k0, so the sum collapses to the
        # single j with j + M - k0 = k0
        expect = np.zeros(7)
        expect[2 * k0 - mi] = -b * bar
        assert np.allclose(alpha[1], expect, atol=1e-14)
        assert np.allclose(alpha[0], 0.0)

    def test_zero_sum_under_constraints(self):
        # N=9 has a strict support window [3, 7] (1-based), for which
        # the index range argument holds exactly
        rng = np.random.default_rng(8)
        g = JumpGrid.ungrouped(9, 0.1)
        sl = support_slice(g)
        x_sup = g.x[sl]
        raw = rng.standard_normal((3, 4, x_sup.size))
        proj, _ = project_dtl_constraints(raw, x_sup)
        betas = np.zeros((3, 4, 9))
        betas[:, :, sl] = proj
        alpha = dtl_drift(betas, 0.0, [0.0, 0.2, 0.5, 1.0], g)
        assert np.max(np.abs(alpha.sum(axis=1))) <= 1e-10

    def test_bilinear_scaling(self):
        rng = np.random.default_rng(9)
        g = JumpGrid.ungrouped(9, 0.1)
        betas = rng.standard_normal((2, 3, 9))
        a1 = dtl_drift(betas, 0.0, [0.0, 0.3, 0.6], g)
        a2 = dtl_drift(2.0 * betas, 0.0, [0.0, 0.3, 0.6], g)
        assert np.allclose(a2, 4.0 * a1, rtol=1e-12, atol=1e-12)


class TestToAlphaHat:
    def test_addition(self):
        a = np.array([1.0, 2.0])
        dk = np.array([0.5, -0.5])
        assert np.allclose(to_alpha_hat(a, dk), [1.5, 1.5])

    def test_constant_kappa(self):
        a = np.array([0.3])
        assert np.allclose(to_alpha_hat(a, np.zeros(1)), a)
