import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwtalab import nn
from kwtalab import theorylab as tl
from kwtalab.data import synthetic_1d
from kwtalab.kwta import activation_pattern
from kwtalab.nn import LayerSpec
from kwtalab.tensor import gaussian_matrix, make_rng, random_unit_vector


class TestPerpendicularPerturb:
    def test_identities(self):
        rng = make_rng(0)
        for _ in range(200):
            x = rng.standard_normal(8) * rng.uniform(0.1, 10)
            beta = rng.uniform(0.01, 0.99)
            xp = tl.perpendicular_perturb(x, beta, rng)
            d = xp - x
            n = np.linalg.norm(x)
            assert abs(d @ x) <= 1e-12 * n * np.linalg.norm(d)
            assert abs(np.linalg.norm(d) - math.sqrt(beta) * n) <= 1e-12 * n
            cos = (x @ xp) / (n * np.linalg.norm(xp))
            assert abs(cos - 1 / math.sqrt(1 + beta)) < 1e-12

    def test_plane_has_one_axis(self):
        xp = tl.perpendicular_perturb(np.array([1.0, 0.0]), 1.0, make_rng(3))
        assert abs(xp[0] - 1) < 1e-15 and abs(abs(xp[1]) - 1) < 1e-15

    @pytest.mark.parametrize("x,beta", [([1.0], 0.5), ([0.0, 0.0], 0.5), ([1.0, 0.0], 0.0)])
    def test_rejects(self, x, beta):
        with pytest.raises(ValueError):
            tl.perpendicular_perturb(np.array(x), beta, make_rng(0))

    def test_pattern_invariant_to_positive_scale(self):
        rng = make_rng(2)
        W = gaussian_matrix(256, 8, 1 / 256, rng)
        for _ in range(50):
            xp = tl.perpendicular_perturb(random_unit_vector(8, rng), 0.25, rng)
            c = rng.uniform(0.1, 10)
            assert activation_pattern(W @ (c * xp), 76) == activation_pattern(W @ xp, 76)


class TestDense:
    def test_config_guards(self):
        for kw in (dict(gamma=0.48), dict(gamma=0.0), dict(beta=0.0), dict(beta=1.0), dict(m=1),
                   dict(l=4, m=8), dict(l=3, gamma=0.3)):
            with pytest.raises(tl.ConfigError):
                tl.DenseTrialConfig(**kw)

    def test_tiny_beta_rarely_changes(self):
        rep = tl.dense_discontinuity_trial(tl.DenseTrialConfig(m=8, l=256, beta=1e-6, trials=200))
        big = tl.dense_discontinuity_trial(tl.DenseTrialConfig(m=8, l=256, beta=0.25, trials=200))
        assert rep.fraction < big.fraction
        assert rep.fraction < 0.5

    def test_non_decreasing_in_beta(self):
        reps = [tl.dense_discontinuity_trial(tl.DenseTrialConfig(m=8, l=128, beta=b, trials=300))
                for b in (0.0001, 0.001, 0.01, 0.1)]
        assert tl.non_decreasing_within(reps)

    def test_report_fields(self):
        rep = tl.dense_discontinuity_trial(tl.DenseTrialConfig(l=64, trials=10, seed=7))
        assert rep.trials == 10 and rep.seed == 7 and len(rep.rows) == 10
        assert rep.summary_row()["fraction"] == rep.fraction
        assert [r["trial"] for r in rep.rows] == list(range(10))

    def test_threads_do_not_change_rows(self):
        cfg = tl.DenseTrialConfig(l=64, trials=12)
        assert tl.dense_discontinuity_trial(cfg, threads=1).rows == tl.dense_discontinuity_trial(cfg, threads=3).rows

    def test_report_rejects_overcount(self):
        with pytest.raises(ValueError):
            tl.TrialReport({}, 3, 4, 0)


class TestDisjoint:
    def test_single_point_always_disjoint(self):
        rep = tl.disjoint_pattern_trial(tl.DisjointTrialConfig(l=256, n_points=1, trials=5))
        assert rep.fraction == 1.0

    def test_alpha_range(self):
        with pytest.raises(tl.ConfigError):
            tl.DisjointTrialConfig(alpha=0.4)
        with pytest.raises(tl.ConfigError):
            tl.DisjointTrialConfig(alpha=1.0)
        tl.DisjointTrialConfig(alpha=0.5)

    def test_duplicate_points_rejected(self):
        x = np.array([1.0, 2.0, 3.0])
        with pytest.raises(tl.PreconditionError):
            tl.check_admissible(np.stack([x, x]), 0.9)

    def test_admissible_points(self):
        xs = tl.admissible_points(10, 16, 0.5, make_rng(0))
        assert xs.shape == (10, 16)
        assert tl.max_pairwise_cosine(xs) <= 0.5
        np.testing.assert_allclose(np.linalg.norm(xs, axis=1), 1.0)

    def test_budget_exhausted(self):
        with pytest.raises(tl.ConfigError):
            tl.admissible_points(50, 2, 0.5, make_rng(0), budget=1000)

    def test_overlaps_match_argsort_oracle(self):
        rng = make_rng(4)
        W = gaussian_matrix(512, 16, 1 / 512, rng)
        xs = tl.admissible_points(6, 16, 0.5, rng)
        masks = tl.pattern_masks(W, xs, 4)
        for i in range(6):
            top = set(np.argsort(-(W @ xs[i]), kind="stable")[:4].tolist())
            assert set(np.flatnonzero(masks[i]).tolist()) == top

    def test_disjoint_fraction_grows_with_width(self):
        reps = [tl.disjoint_pattern_trial(tl.DisjointTrialConfig(l=l, n_points=5, trials=60), with_fit=False)
                for l in (64, 1024, 16384)]
        assert tl.non_decreasing_within(reps)
        assert reps[-1].fraction > reps[0].fraction


class TestFitLabels:
    def test_single_point(self):
        rng = make_rng(0)
        W = gaussian_matrix(64, 4, 1 / 64, rng)
        x = random_unit_vector(4, rng)
        v = tl.fit_labels(W, x[None], [2.5], 3)
        assert np.count_nonzero(v) == 1
        assert tl.fit_labels_error(W, x[None], [2.5], v, 3) < 1e-12

    def test_zero_labels(self):
        rng = make_rng(1)
        W = gaussian_matrix(256, 4, 1 / 256, rng)
        xs = np.eye(4)
        np.testing.assert_array_equal(tl.fit_labels(W, xs, np.zeros(4), 2), np.zeros(256))

    def test_hand_case(self):
        W = np.eye(3)
        v = tl.fit_labels(W, np.eye(3), [1.0, -2.0, 4.0], 1)
        np.testing.assert_array_equal(v, [1.0, -2.0, 4.0])

    def test_overlap_raises(self):
        W = np.array([[1.0, 1.0], [0.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(tl.PreconditionError):
            tl.fit_labels(W, np.eye(2), [1.0, 2.0], 1)

    def test_wide_layer_exact(self):
        rng = make_rng(8)
        done = 0
        for _ in range(20):
            W = gaussian_matrix(16384, 16, 1 / 16384, rng)
            xs = tl.admissible_points(8, 16, 0.5, rng)
            zs = rng.uniform(-1, 1, 8)
            try:
                v = tl.fit_labels(W, xs, zs, 4)
            except tl.PreconditionError:
                continue
            assert tl.fit_labels_error(W, xs, zs, v, 4) < 1e-9
            done += 1
            if done == 3:
                break
        assert done == 3


class TestBernoulli:
    def test_too_many_points_for_dimension(self):
        with pytest.raises(tl.ConfigError):
            tl.bernoulli_points(2, 1, 0.5, make_rng(0))

    def test_duplicates_resampled(self):
        pts = tl.bernoulli_points(3, 2, 0.5, make_rng(0))
        assert len({p.tobytes() for p in pts}) == 3
        assert all(p.any() for p in pts)

    def test_guards(self):
        with pytest.raises(tl.ConfigError):
            tl.bernoulli_experiment(8, 256, 0.5, 1024, 0.48, 5)
        with pytest.raises(tl.ConfigError):
            tl.bernoulli_experiment(8, 256, 0.6, 1024, 0.2, 5)
        with pytest.raises(tl.ConfigError):
            tl.bernoulli_experiment(8, 256, 0.3, 1024, 0.2, 5, strict=True)

    def test_desk_example(self):
        rep = tl.bernoulli_experiment(8, 256, 0.5, 8192, 0.2, 50, seed=0)
        assert rep.fraction >= 0.9


class TestJump:
    def test_hand_three_wide(self):
        # W x(t) = (1 - t, t, 0)
        rep = tl.measure_jump(np.eye(3), np.array([1.0, 0, 0]), np.array([-1.0, 1, 0]), 1 / 3)
        assert rep.found
        assert abs(rep.t - 0.5) < 1e-10
        assert abs(rep.x_star - 0.5) < 1e-10
        assert (rep.leaving, rep.entering) == (0, 1)

    def test_gamma_one_never_crosses(self):
        rng = make_rng(0)
        W = gaussian_matrix(32, 4, 1 / 32, rng)
        assert not tl.measure_jump(W, rng.standard_normal(4), rng.standard_normal(4), 1.0).found

    def test_parallel_direction_rejected(self):
        with pytest.raises(ValueError):
            tl.measure_jump(np.eye(3), np.array([1.0, 0, 0]), np.array([2.0, 0, 0]), 1 / 3)

    def test_against_analytic_crossing(self):
        rng = make_rng(5)
        for _ in range(100):
            W = gaussian_matrix(64, 8, 1 / 64, rng)
            x, u = rng.standard_normal(8), rng.standard_normal(8)
            rep = tl.measure_jump(W, x, u, 0.1, t_max=2.0)
            exact = tl.first_crossing_exact(W @ x, W @ u, 6)
            if exact > 2.0:
                continue
            assert rep.found
            assert abs(rep.t - exact) <= 1e-9 * max(1, exact)
            assert rep.gap < 1e-9

    def test_jump_vector(self):
        Wn = np.array([[1.0, 2.0, 3.0]])
        rep = tl.measure_jump(np.eye(3), np.array([1.0, 0, 0]), np.array([-1.0, 1, 0]), 1 / 3, W_next=Wn)
        assert abs(rep.jump_vector[0] - 0.5) < 1e-9

    def test_sweep_reports(self):
        reps = tl.jump_sweep([0.1, 0.4], l=128, m=16, crossings=20)
        assert [r.config["gamma"] for r in reps] == [0.1, 0.4]
        assert all(len(r.rows) == 20 for r in reps)


class TestAffine:
    def test_linear_model(self):
        m = nn.build_model([LayerSpec.dense(5, 3), LayerSpec.dense(3, 2)], make_rng(0))
        c = tl.affine_region_check(m, make_rng(1).standard_normal(5), 10, 0.1, make_rng(2))
        assert c.retained == 10 and c.defect < 1e-12

    def test_relu_positive_region(self):
        m = nn.build_model(nn.mlp_specs(4, [8], 2, "relu"), make_rng(0))
        m.params[0]["W"][:] = np.abs(m.params[0]["W"])
        c = tl.affine_region_check(m, np.ones(4), 10, 1e-6, make_rng(1))
        assert c.retained == 10 and c.defect < 1e-10

    def test_kwta_mlp(self):
        rng = make_rng(3)
        m = nn.build_model(nn.mlp_specs(16, [64, 64], 10, "kwta", 0.2), rng)
        for _ in range(5):
            c = tl.affine_region_check(m, rng.standard_normal(16), 10, 1e-4, rng)
            assert c.retained > 0 and c.defect < 1e-8

    def test_too_thin(self):
        m = nn.build_model(nn.mlp_specs(4, [8], 2, "kwta", 0.5), make_rng(0))
        c = tl.affine_region_check(m, make_rng(1).standard_normal(4), 10, 1e3, make_rng(2))
        assert c.region_too_thin and c.discarded == 10


class TestLandscape:
    def test_default_grid_size(self):
        m = nn.build_model(nn.mlp_specs(6, [8], 3, "kwta", 0.5), make_rng(0))
        land = tl.loss_landscape(m, make_rng(1).random(6), 1, make_rng(2))
        assert land.loss.shape == (50, 50) and len(land.rows()) == 2500

    def test_single_sample_is_clean_loss(self):
        m = nn.build_model(nn.mlp_specs(6, [8], 3, "kwta", 0.5), make_rng(0))
        x = make_rng(1).random(6)
        land = tl.loss_landscape(m, x, 1, make_rng(2), samples_per_axis=1)
        clean = nn.softmax_cross_entropy(nn.forward(m, x).logits, 1)[0]
        assert land.rows() == [{"eps1": 0.0, "eps2": 0.0, "loss": land.loss[0, 0]}]
        assert land.loss[0, 0] == clean

    def test_directions(self):
        m = nn.build_model(nn.mlp_specs(6, [8], 3, "relu"), make_rng(0))
        land = tl.loss_landscape(m, make_rng(1).random(6), 1, make_rng(2))
        assert set(np.unique(np.abs(land.g1))) <= {1.0}
        assert abs(land.g1.ravel() @ land.g2.ravel()) < 1e-12
        assert abs(np.linalg.norm(land.g2) - np.linalg.norm(land.g1)) < 1e-12

    def test_zero_gradient_fallback(self):
        m = nn.build_model([LayerSpec.dense(4, 2)], make_rng(0))
        m.params[0]["W"][:] = 0
        land = tl.loss_landscape(m, np.ones(4), 0, make_rng(1))
        assert land.fallback and np.all(np.abs(land.g1) == 1)

    def test_linear_cross_entropy_is_not_affine_but_logit_is(self):
        # a one-logit-difference model: the gap is linear, so a linear "loss" grid is planar
        eps = np.linspace(-0.04, 0.04, 50)
        e1, e2 = np.meshgrid(eps, eps, indexing="ij")
        assert tl.affine_plane_residual(eps, 3 * e1 - 2 * e2 + 1) < 1e-10
        assert tl.laplacian_sign_changes(3 * e1 - 2 * e2 + 1) == 0

    def test_laplacian_hand_case(self):
        g = np.zeros((4, 3))
        g[1, 1] = 1.0   # Laplacian -4 at (1,1)
        g[2, 1] = -1.0  # Laplacian +4 at (2,1)
        assert tl.laplacian_sign_changes(g) == 1

    def test_laplacian_small_grid(self):
        assert tl.laplacian_sign_changes(np.ones((2, 2))) == 0


class TestFit1D:
    def test_count_jumps(self):
        pred = np.array([0.0, 0.1, 0.2, 1.2, 1.3, 1.4])
        jumps, thr = tl.count_jumps(pred)
        assert jumps.tolist() == [2] and abs(thr - 0.5) < 1e-12

    def test_count_jumps_affine(self):
        assert tl.count_jumps(np.linspace(0, 1, 100) * 3)[0].size == 0

    def test_kwta_fit_has_jumps(self):
        t, v = synthetic_1d(np.sin, 40, -3, 3)
        assert tl.fit_1d_demo(t, v, 0.15).jump_count >= 1

    def test_identity_activation_has_none(self):
        t, v = synthetic_1d(np.sin, 40, -3, 3)
        assert tl.fit_1d_demo(t, v, 1.0).jump_count == 0

    def test_constant_target_identity_activation(self):
        t, v = synthetic_1d(lambda s: 0.7, 40, -3, 3)
        res = tl.fit_1d_demo(t, v, 1.0)
        assert res.jump_count == 0
        assert res.train_loss < 1e-3


class TestCsv:
    def test_rows_round_trip(self, tmp_path):
        tl.write_rows_csv([{"a": 0.1, "b": True}, {"a": 1 / 3, "c": (1, 2)}], tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b,c", "0.1,1,", "0.3333333333333333,,1 2"]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_first_crossing_matches_scan(n, seed):
    rng = make_rng(seed)
    a, c = rng.standard_normal(n), rng.standard_normal(n)
    k = max(1, n // 3)
    t = tl.first_crossing_exact(a, c, k)
    if math.isfinite(t):
        from kwtalab.kwta import winner_mask
        assert (winner_mask(a + 0.999 * t * c, k) == winner_mask(a, k)).all()
