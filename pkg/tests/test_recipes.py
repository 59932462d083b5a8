import math

import numpy as np
import pytest

from gp3.dynamics import flow_map, linear_decay_system
from gp3.geometry import Hyperrectangle
from gp3.gp import mean_batch
from gp3.kernels import Family, KernelSpec
from gp3.recipes import (DEFAULT_HYPERPARAMETERS, LIPSCHITZ_DOMAIN, LipschitzRecipeConfig,
                         RoaRecipeConfig, adjacency, builtin_target, builtin_training_set, cell_components,
                         encircles, points_in_cells, relative_change_last_decade, roa_checks,
                         run_lipschitz_recipe, run_roa_recipe)
from gp3.verify import Status


def decay_config(**overrides):
    base = dict(system=linear_decay_system(2), lower=(-2.0, -2.0), upper=(2.0, 2.0),
                n_samples=64, horizon=20, dt=0.5,
                kernel=KernelSpec(Family.MATERN52, 50.0, (2.0, 2.0)), noise_variance=1e-3,
                L_f=math.exp(-0.5), b_min=0.005, radius=0.3, initial_cells=16,
                baseline_grid=21, baseline_steps=40, baseline_radius=0.1)
    base.update(overrides)
    return RoaRecipeConfig(**base)


@pytest.fixture(scope="module")
def decay_run():
    cfg = decay_config()
    return cfg, run_roa_recipe(cfg)


class TestBuiltinData:
    def test_target_values(self):
        assert builtin_target([[0.0, 0.0]])[0] == pytest.approx(1.5)
        assert builtin_target([[math.pi / 2, 0.0]])[0] == pytest.approx(0.5)

    def test_training_grid(self):
        train = builtin_training_set()
        assert train.X.shape == (100, 2)
        lo, hi = np.array(LIPSCHITZ_DOMAIN)
        assert np.all(train.X >= lo) and np.all(train.X <= hi)
        np.testing.assert_array_equal(train.y, builtin_target(train.X))

    def test_noise_is_seeded(self):
        a = builtin_training_set(noise_std=0.1, seed=3)
        b = builtin_training_set(noise_std=0.1, seed=3)
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.y, builtin_training_set().y)


class TestLipschitzRecipe:
    def test_defaults_use_fixed_hyperparameters(self):
        res = run_lipschitz_recipe(LipschitzRecipeConfig(cell_budget=64))
        assert set(res) == set(Family)
        for fam, curve in res.items():
            sf2, ls = DEFAULT_HYPERPARAMETERS[fam]
            assert curve.spec.signal_variance == sf2
            assert tuple(curve.spec.length_scales) == ls
            values = [v for _, v in curve.curve]
            assert curve.naive == values[0] and curve.final == min(values)
            assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))

    def test_single_cell_budget(self):
        res = run_lipschitz_recipe(LipschitzRecipeConfig(families=("se",), cell_budget=1))
        curve = res[Family.SE]
        assert len(curve.curve) == 1 and curve.final == curve.naive

    def test_deterministic(self):
        cfg = LipschitzRecipeConfig(families=("matern32",), cell_budget=256)
        a = run_lipschitz_recipe(cfg)[Family.MATERN32].curve
        b = run_lipschitz_recipe(cfg)[Family.MATERN32].curve
        assert a == b

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LipschitzRecipeConfig(families=())
        with pytest.raises(ValueError):
            LipschitzRecipeConfig(cell_budget=0)


class TestRelativeChange:
    def test_interpolates_in_log_count(self):
        curve = [(10, 2.0), (100, 1.5), (1000, 1.0)]
        assert relative_change_last_decade(curve) == pytest.approx(0.5)
        curve = [(1, 4.0), (100, 2.0), (1000, 1.0)]
        assert relative_change_last_decade(curve) == pytest.approx(1.0)

    def test_needs_a_decade(self):
        with pytest.raises(ValueError):
            relative_change_last_decade([(4, 2.0), (16, 1.0)])


class TestCellGeometry:
    def test_face_adjacency(self):
        C = np.array([[0.5, 0.5], [1.5, 0.5], [1.5, 1.5], [3.5, 0.5]])
        B = np.full((4, 2), 0.5)
        A = adjacency(C, B).tocsr()
        pairs = {tuple(sorted(p)) for p in zip(*A.nonzero())}
        # the diagonal neighbour (0, 2) shares only a corner
        assert pairs == {(0, 1), (1, 2)}
        count, labels = cell_components(C, B)
        assert count == 2 and labels[0] == labels[2] != labels[3]

    def test_mixed_sizes(self):
        C = np.array([[0.0, 0.0], [1.5, 0.25]])
        B = np.array([[1.0, 1.0], [0.5, 0.25]])
        assert cell_components(C, B)[0] == 1

    def test_ring_encircles(self):
        xs = np.arange(-1.5, 2.0, 1.0)
        C = np.array([(x, y) for x in xs for y in xs])
        B = np.full((len(C), 2), 0.5)
        inner = np.all(np.abs(C) < 1.0, axis=1)
        _, labels = cell_components(C, B)
        assert encircles(C, B, labels, inner).all()
        keep = ~(C[:, 0] > 1.0)
        _, labels = cell_components(C[keep], B[keep])
        assert not encircles(C[keep], B[keep], labels, inner[keep]).any()

    def test_points_in_cells(self):
        C = np.array([[0.0, 0.0], [2.0, 0.0]])
        B = np.array([[0.5, 0.5], [0.25, 0.25]])
        P = np.array([[0.5, 0.5], [0.6, 0.0], [2.2, -0.2], [1.0, 0.0]])
        assert points_in_cells(P, C, B).tolist() == [True, False, True, False]
        assert points_in_cells(P, C[:0], B[:0]).tolist() == [False] * 4


class TestRoaRecipe:
    def test_decrease_region_covers_domain(self, decay_run):
        cfg, res = decay_run
        rep = res.report
        assumed = rep.mask(Status.ASSUMED)
        cell_vol = np.prod(2 * rep.half_widths, axis=1)
        outside = cfg.domain.volume - math.pi * cfg.radius**2
        assert cell_vol[res.W].sum() >= 0.95 * outside
        assert res.W.any() and not res.warnings
        assert np.all(res.W | assumed | rep.mask(Status.MIN_SIZE))

    def test_level_set_inside_verified_region(self, decay_run):
        _, res = decay_run
        assumed = res.report.mask(Status.ASSUMED)
        assert np.all(res.W[res.V] | assumed[res.V])
        assert np.all(res.upper_mu[res.V] <= res.c_star)

    def test_w_cells_spot_check(self, decay_run):
        cfg, res = decay_run
        rep, model = res.report, res.model
        f = flow_map(cfg.make_system(), cfg.dt)
        rng = np.random.default_rng(7)
        idx = rng.choice(np.flatnonzero(res.W), size=40, replace=False)
        for i in idx:
            cell = Hyperrectangle(rep.centers[i], rep.half_widths[i])
            X = cell.sample(500, rng)
            dv = mean_batch(model, f(X)) - mean_batch(model, X)
            assert np.all(dv <= rep.hi[i] + 1e-9) and rep.hi[i] <= 0.0

    def test_checks_against_simulation(self, decay_run):
        cfg, res = decay_run
        checks = roa_checks(res, cfg.make_system(), cfg.baseline_steps, cfg.dt, cfg.baseline_radius)
        assert checks.W_nonempty and checks.W_encircles_ball
        assert checks.V_in_W_or_ball and checks.V_centers_converged and checks.baseline_points_ok
        assert res.baseline_converged.all()

    def test_small_ball_gives_finite_threshold(self):
        res = run_roa_recipe(decay_config(radius=0.05, skip_baseline=True))
        assert res.report.mask(Status.MIN_SIZE).any()
        assert math.isfinite(res.c_star)
        assert np.all(res.upper_mu[res.V] <= res.c_star)
        assert res.baseline_points is None

    def test_exclusion_covers_domain(self):
        res = run_roa_recipe(decay_config(radius=10.0, skip_baseline=True))
        assert np.all(res.report.mask(Status.ASSUMED))
        assert res.c_star == math.inf
        assert not res.W.any()
        assert any("empty" in w for w in res.warnings)

    def test_deterministic(self, decay_run):
        cfg, res = decay_run
        again = run_roa_recipe(cfg)
        np.testing.assert_array_equal(again.report.hi, res.report.hi)
        np.testing.assert_array_equal(again.V, res.V)

    def test_invalid(self):
        with pytest.raises(ValueError):
            decay_config(radius=0.0)
        with pytest.raises(ValueError):
            decay_config(b_min=-1.0)
