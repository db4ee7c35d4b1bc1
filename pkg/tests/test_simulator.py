import math

import numpy as np
import pytest

from tdoa_placer.geometry import Box, LinkStatus, Material, Obstacle, Placement, Scene
from tdoa_placer.metric import Evaluator, mse_lower_bound
from tdoa_placer.noise import NoiseParams
from tdoa_placer.simulator import (
    Diverged,
    GridSearch,
    SimConfig,
    TooFewMeasurements,
    multilaterate,
    sample_measurements,
    simulate,
    simulate_point,
)

NO_REJECT = math.inf


def square_scene(pts, obstacles=(), half=5.0):
    return Scene(Box([-half, -half], [half, half]), obstacles, np.atleast_2d(np.asarray(pts, dtype=float)))


def cross(L):
    return Placement([[-L, 0], [L, 0], [0, -L], [0, L]])


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(trials=0)
    with pytest.raises(ValueError):
        SimConfig(outlier_rate=1.0)
    with pytest.raises(ValueError):
        SimConfig(estimator="lm")


def test_noise_free_measurements_are_ideal():
    sc = square_scene([[0.5, 0.2]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5]])
    meas = sample_measurements([0.5, 0.2], pl, sc, NoiseParams(sigma_los=0.0), np.random.default_rng(0))
    p = np.array([0.5, 0.2])
    for q, v in meas:
        a_i, a_j = pl.pair(q)
        assert v == np.linalg.norm(p - a_j) - np.linalg.norm(p - a_i)
    assert [q for q, _ in meas] == [0, 1]


def test_blocked_pair_is_omitted():
    wall = (Obstacle([2.0, -1.0], [2.5, 1.0], Material.BLOCKING),)
    sc = square_scene([[0.0, 0.0]], wall)
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5]])
    assert sc.link_status(np.zeros(2), np.array([[5.0, 0.0]]))[0] == LinkStatus.BLOCKED
    meas = sample_measurements([0, 0], pl, sc, NoiseParams(), np.random.default_rng(1))
    assert [q for q, _ in meas] == [1]


def test_out_of_range_pair_is_omitted():
    sc = Scene(Box([-5, -5], [5, 5]), (), np.zeros((1, 2)), operating_range=6.0)
    pl = Placement([[-5, 0], [5, 0], [0, -3], [0, 3]])
    meas = sample_measurements([0, 0], pl, sc, NoiseParams(), np.random.default_rng(1))
    assert [q for q, _ in meas] == [1]


def test_outlier_rejection():
    sc = square_scene([[0.0, 0.0]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5], [-4, -4], [4, 4]])
    params = NoiseParams(sigma_los=0.05)
    cfg = SimConfig(trials=1, outlier_rate=0.5, outlier_reject_threshold=1.0)
    rng = np.random.default_rng(3)
    log = []
    for _ in range(300):
        sample_measurements([0, 0], pl, sc, params, rng, cfg, injected=log)
    assert len(log) > 300
    kept = [c for _, c, k in log if k]
    assert kept and all(abs(c) <= 1.0 + 0.5 for c in kept)
    assert any(not k for _, _, k in log)
    # without noise the surviving corruption is exactly the error
    quiet = NoiseParams(sigma_los=0.0)
    log = []
    for _ in range(100):
        sample_measurements([0, 0], pl, sc, quiet, rng, cfg, injected=log)
    assert all((abs(c) <= 1.0) == k for _, c, k in log)


def test_gauss_newton_converges_from_perturbed_truth():
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5], [-4, 3], [4, -3]])
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(-3, 3, 2)
        meas = [(q, float(np.linalg.norm(p - pl.pair(q)[1]) - np.linalg.norm(p - pl.pair(q)[0]))) for q in range(3)]
        x = multilaterate(meas, pl, p + rng.normal(0, 0.3, 2))
        assert np.linalg.norm(x - p) < 1e-6


def test_single_pair_in_2d_is_too_few():
    pl = Placement([[-5, 0], [5, 0]])
    with pytest.raises(TooFewMeasurements):
        multilaterate([(0, 0.0)], pl, [0.0, 0.0])
    st = simulate_point([0, 0], pl, square_scene([[0, 0]]), NoiseParams(), SimConfig(trials=20))
    assert st.too_few == 20 and st.used == 0 and math.isinf(st.rmse)


def test_degenerate_geometry_diverges():
    # both pairs on one line: the Jacobian is rank one on that line
    pl = Placement([[-5, 0], [5, 0], [-3, 0], [3, 0]])
    with pytest.raises(Diverged):
        multilaterate([(0, 0.0), (1, 0.0)], pl, [0.0, 0.0])


def test_orthogonal_pairs_far_field():
    L = 1000.0
    sc = Scene(Box([-L - 1, -L - 1], [L + 1, L + 1]), (), np.zeros((1, 2)))
    st = simulate_point([0, 0], cross(L), sc, NoiseParams(sigma_los=1.0),
                        SimConfig(trials=100_000, outlier_reject_threshold=NO_REJECT))
    assert st.rmse == pytest.approx(math.sqrt(0.5), rel=0.15)


def test_seed_determinism_and_batch_independence():
    sc = square_scene([[0.3, -0.4], [1.0, 1.0]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5], [-4, 3], [4, -3]])
    cfg = SimConfig(trials=200, seed=11)
    a = simulate(pl, sc, NoiseParams(), cfg, keep_trials=True)
    b = simulate(pl, sc, NoiseParams(), cfg, keep_trials=True)
    assert np.array_equal(a.per_point_rmse, b.per_point_rmse)
    # the first trials do not depend on how many follow
    short = simulate(pl, sc, NoiseParams(), SimConfig(trials=50, seed=11), keep_trials=True)
    assert np.array_equal(short.points[0].estimates, a.points[0].estimates[:50])


def test_all_los_bias_vanishes():
    sc = square_scene([[0.4, -0.7]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5], [-4, 3], [4, -3]])
    st = simulate_point([0.4, -0.7], pl, sc, NoiseParams(sigma_los=0.05), SimConfig(trials=20_000, seed=2))
    assert np.all(np.abs(st.bias) < 3 * st.bias_stderr)


def test_severe_tag_link_bias_matches_metric():
    L = 100.0
    wall = (Obstacle([40, -1], [41, 1], Material.METAL),)
    sc = Scene(Box([-L - 1, -L - 1], [L + 1, L + 1]), wall, np.zeros((1, 2)))
    pl = Placement([[0, -L], [L, 0], [-L, 0], [-70, -70], [0, L], [70, 70]])
    params = NoiseParams(sigma_los=0.05)
    pm = mse_lower_bound([0, 0], pl, sc, params)
    assert pm.conditions[0].tag_to_j == LinkStatus.SEVERE_NLOS
    assert pm.conditions[0].anchor_to_anchor == LinkStatus.LOS
    st = simulate_point([0, 0], pl, sc, params, SimConfig(trials=20_000, seed=4, outlier_reject_threshold=NO_REJECT))
    assert np.linalg.norm(pm.bias) > 0.05
    assert np.all(np.abs(st.bias - pm.bias) < 3 * st.bias_stderr)


def test_standard_error_scaling():
    sc = square_scene([[0.0, 0.0]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5]])
    params = NoiseParams(sigma_los=0.1)
    small = simulate_point([0, 0], pl, sc, params, SimConfig(trials=4000, seed=1))
    large = simulate_point([0, 0], pl, sc, params, SimConfig(trials=8000, seed=1))
    ratio = large.bias_stderr / small.bias_stderr
    assert np.all(np.abs(ratio - 1 / math.sqrt(2)) < 0.2 / math.sqrt(2))


def test_rmse_dominates_bias_and_tracks_bound():
    rng = np.random.default_rng(8)
    params = NoiseParams(sigma_los=0.05)
    sc = square_scene(rng.uniform(-2, 2, (3, 2)))
    pl = Placement([[-5, -2], [5, 1], [1, -5], [-2, 5], [-5, 4], [4, -5]])
    rep = simulate(pl, sc, params, SimConfig(trials=4000, seed=3))
    bound = np.sqrt(Evaluator(sc, params).score(pl).mse)
    for st, b in zip(rep.points, bound):
        assert st.rmse >= np.linalg.norm(st.bias)
        assert 0.85 * b <= st.rmse <= 1.3 * b
    assert rep.divergences == 0 and rep.warnings == []


def test_grid_initialisation():
    sc = square_scene([[1.2, -0.8]])
    pl = Placement([[-5, 0], [5, 0], [0, -5], [0, 5], [-4, 3], [4, -3]])
    st = simulate_point([1.2, -0.8], pl, sc, NoiseParams(sigma_los=0.02),
                        SimConfig(trials=200, estimator_init=GridSearch(0.5)))
    assert st.used == 200
    assert st.rmse < 0.1
