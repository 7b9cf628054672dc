import itertools
import math

import numpy as np
import pytest

from qbayes.design import (
    DesignConfig,
    DesignError,
    expected_utility,
    exponential_schedule,
    greedy_next_control,
    occupation_rate,
    occupation_time,
    particle_pair_time,
    path_probabilities,
    precision_metric,
    propose_control,
    run_design,
    sigma_inverse_candidates,
)
from qbayes.models import NO_CONTROL, CoinModel, LikelihoodModel, MultiCosModel, PrecessionModel, TimeControl
from qbayes.particles import ParticleCloud, cloud_covariance
from qbayes.smc import SmcConfig


class ScaledCoin(LikelihoodModel):
    """P(1) = t * theta: the control picks which coin is tossed."""

    control_kind = "time"

    def __init__(self):
        super().__init__(((0.0, 1.0),))

    def p1(self, theta, data):
        return theta[:, :1] * data.t

    def dp1(self, theta, data):
        return (np.ones_like(theta[:, :1]) * data.t)[..., None]


def two_point():
    return ParticleCloud.uniform(np.array([[0.25], [0.75]]))


def test_coin_tree_oracle():
    assert expected_utility(two_point(), CoinModel(), [NO_CONTROL]) == pytest.approx(-0.046875, abs=1e-15)
    assert expected_utility(two_point(), CoinModel(), []) == pytest.approx(-0.0625, abs=1e-15)
    probs = path_probabilities(two_point(), CoinModel(), [NO_CONTROL])
    assert np.allclose(sorted(probs), [0.5, 0.5])


def test_depth_must_match_controls():
    with pytest.raises(DesignError):
        expected_utility(two_point(), CoinModel(), [NO_CONTROL], depth=2)


def test_depth_one_matches_reweight_copy():
    rng = np.random.default_rng(0)
    cloud = ParticleCloud.from_weights(rng.uniform(0, 5, (200, 1)), rng.random(200))
    model, ctl = PrecessionModel(), TimeControl(0.7)
    x, w = cloud.locations, cloud.weights / cloud.weights.sum()
    p1 = np.cos(x[:, 0] * 0.7 / 2) ** 2
    total = 0.0
    for like in (p1, 1 - p1):
        pw = w * like
        post = ParticleCloud.from_weights(x, pw)
        total -= pw.sum() * np.trace(cloud_covariance(post))
    assert expected_utility(cloud, model, [ctl]) == pytest.approx(total, abs=1e-12)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_path_probabilities_sum_to_one(depth):
    rng = np.random.default_rng(depth)
    cloud = ParticleCloud.uniform(rng.uniform(0, 5, (100, 1)))
    ctl = [TimeControl(t) for t in rng.uniform(0, 3, depth)]
    assert path_probabilities(cloud, PrecessionModel(), ctl).sum() == pytest.approx(1.0, abs=1e-10)


def test_more_experiments_never_hurt_on_coin():
    rng = np.random.default_rng(3)
    cloud = ParticleCloud.from_weights(rng.random((50, 1)), rng.random(50))
    prev = expected_utility(cloud, CoinModel(), [])
    for k in range(1, 4):
        cur = expected_utility(cloud, CoinModel(), [NO_CONTROL] * k)
        assert cur >= prev - 1e-10
        prev = cur


def test_control_independent_likelihood_gives_equal_utility():
    u = [expected_utility(two_point(), CoinModel(), [NO_CONTROL]) for _ in range(3)]
    assert len(set(u)) == 1


def test_greedy_single_candidate_and_coin_pick():
    c = TimeControl(3.0)
    assert greedy_next_control(two_point(), PrecessionModel(), [c])[0] is c
    cloud = ParticleCloud.uniform(np.linspace(0.005, 0.995, 100)[:, None])
    best, _ = greedy_next_control(cloud, ScaledCoin(), [TimeControl(0.1), TimeControl(1.0)])
    assert best.t == 1.0


def test_greedy_tie_prefers_smallest_time():
    best, _ = greedy_next_control(two_point(), CoinModel(), [NO_CONTROL, NO_CONTROL])
    assert best is NO_CONTROL
    flat = ParticleCloud.uniform(np.array([[1.0], [2.0]]))
    best, _ = greedy_next_control(flat, PrecessionModel(), [TimeControl(0.0), TimeControl(2 * math.pi), TimeControl(4 * math.pi)])
    assert best.t == 0.0


def test_greedy_near_inverse_sigma():
    hits = 0
    for seed in range(30):
        rng = np.random.default_rng([1, seed])
        sigma = rng.uniform(0.05, 0.3)
        cloud = ParticleCloud.uniform(np.clip(rng.normal(5.0, sigma, (400, 1)), 0.0, 10.0))
        cands = [TimeControl(t) for t in np.geomspace(0.05, 50, 60)]
        best, _ = greedy_next_control(cloud, PrecessionModel(), cands)
        s = math.sqrt(cloud_covariance(cloud)[0, 0])
        hits += (1 / 3) <= best.t * s <= 3
    assert hits >= 24


def test_sigma_inverse_candidates_scaling():
    rng = np.random.default_rng(4)
    pts = rng.normal(0, 1, (4000, 1))
    pts = (pts - pts.mean()) / pts.std()
    wide = ParticleCloud.uniform(pts)
    narrow = ParticleCloud.uniform(pts / 2)
    a = np.array([c.t for c in sigma_inverse_candidates(wide, 2000, rng)])
    b = np.array([c.t for c in sigma_inverse_candidates(narrow, 2000, rng)])
    assert np.all(a > 0)
    assert a.mean() == pytest.approx(1.0, rel=0.03)
    assert b.mean() == pytest.approx(2.0, rel=0.03)
    with pytest.raises(DesignError):
        sigma_inverse_candidates(ParticleCloud.uniform(np.ones((5, 1))), 3, rng)


def test_particle_pair_examples():
    rng = np.random.default_rng(5)
    pair = ParticleCloud.uniform(np.array([[0.4], [0.6]]))
    assert particle_pair_time(pair, rng).t == pytest.approx(5.0)
    scaled = ParticleCloud.uniform(np.array([[0.8], [1.2]]))
    assert particle_pair_time(scaled, rng).t == pytest.approx(2.5)
    with pytest.raises(DesignError):
        particle_pair_time(ParticleCloud.uniform(np.zeros((3, 1))), rng)
    gauss = ParticleCloud.uniform(rng.normal(0, 0.1, (1000, 1)))
    ts = [particle_pair_time(gauss, rng).t for _ in range(1000)]
    assert 5.0 <= np.median(ts) <= 20.0


def test_occupation_examples():
    bounds = np.array([[0.0, 1.0], [0.0, 1.0]])
    grid = np.array(list(itertools.product((np.arange(15) + 0.5) / 15, repeat=2)))
    assert occupation_rate(ParticleCloud.uniform(grid), bounds) == 1.0
    lump = ParticleCloud.uniform(np.full((225, 2), 0.5))
    assert occupation_rate(lump, bounds) == pytest.approx(1 / 225)
    assert occupation_time(lump, bounds, t_max=100.0).t == 100.0
    assert occupation_time(ParticleCloud.uniform(grid), bounds).t < 100.0


def test_exponential_schedule():
    ts = [c.t for c in exponential_schedule(9 / 8, 3)]
    assert ts == pytest.approx([1.125, 1.265625, 1.423828125])
    near = [c.t for c in exponential_schedule(1.0001, 5)]
    assert max(near) / min(near) < 1.001
    assert all(np.diff([c.t for c in exponential_schedule(1.5, 10)]) > 0)
    with pytest.raises(DesignError):
        exponential_schedule(1.0, 3)


def test_precision_metric():
    assert precision_metric(0.01, 38) == pytest.approx(0.38)
    assert precision_metric(0.5, 0.0) == 0.0
    assert precision_metric(0.3, 20) == pytest.approx(2 * precision_metric(0.3, 10))


def test_config_validation():
    with pytest.raises(DesignError):
        DesignConfig(heuristic="oracle")
    with pytest.raises(DesignError):
        DesignConfig(lookahead_depth=5)


def test_propose_fixed_and_exponential():
    cloud = ParticleCloud.uniform(np.linspace(0, 10, 50)[:, None])
    rng = np.random.default_rng(0)
    c, u = propose_control(cloud, PrecessionModel(), DesignConfig(heuristic="fixed", schedule=[1.0, 2.0]), 1, rng)
    assert c.t == 2.0 and u is None
    c, _ = propose_control(cloud, PrecessionModel(), DesignConfig(heuristic="exponential"), 0, rng)
    assert c.t == pytest.approx(1.125)


def test_run_design_report_invariants():
    smc = SmcConfig(n_particles=100, propagation="markov")
    rep = run_design(PrecessionModel(), [1.83], 15, DesignConfig(), smc, np.random.default_rng(6),
                     outcome_rng=np.random.default_rng(7))
    assert len(rep.controls) == len(rep.utilities) == len(rep.sd) == 15
    assert np.all(np.diff(rep.elapsed_time) >= 0)
    assert rep.precision == pytest.approx(rep.final_variance * rep.total_time)
    d = rep.as_dict()
    assert d["controls"][0]["kind"] == "time"


def test_run_design_multicos_occupation():
    model = MultiCosModel(2, bounds=((0, 1), (0, 1)))
    cfg = DesignConfig(heuristic="occupation", occupation_constant=3.0)
    smc = SmcConfig(n_particles=100, propagation="markov")
    rep = run_design(model, [0.3, 0.7], 20, cfg, smc, np.random.default_rng(8), outcome_rng=np.random.default_rng(9))
    assert all(isinstance(c, TimeControl) for c in rep.controls)
