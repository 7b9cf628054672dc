import numpy as np
import pytest

from qbayes.mcmc import (
    ChainStats,
    HmcConfig,
    HmcKernel,
    RwmConfig,
    RwmKernel,
    chain_run,
    hamiltonian,
    hmc_step,
    kinetic,
    leapfrog,
    mh_step,
    nuts_step,
    reflect,
    rwm_step,
)
from qbayes.models import GaussianTarget, TargetDensity, gaussian_6d, harmonic_oscillator


class Flat(TargetDensity):
    dim = 1

    def __init__(self, bounds=None):
        self.bounds = None if bounds is None else np.asarray(bounds, dtype=float)

    def log_density_and_grad(self, x):
        return np.zeros(len(x)), np.zeros_like(x)


def test_mh_identity_proposal_always_accepted():
    rng = np.random.default_rng(0)
    x, acc = mh_step(np.array([0.3]), harmonic_oscillator(), lambda x, r: (x.copy(), 0.0), rng)
    assert acc and x[0] == 0.3


def test_mh_zero_density_never_accepted():
    rng = np.random.default_rng(0)
    target = Flat(bounds=[[0.0, 1.0]])
    for _ in range(100):
        x, acc = mh_step(np.array([0.5]), target, lambda x, r: (x + 5.0, 0.0), rng)
        assert not acc and x[0] == 0.5


def test_mh_flat_target_full_acceptance():
    rng = np.random.default_rng(1)
    prop = lambda x, r: (x + r.normal(size=x.shape), 0.0)  # noqa: E731
    x = np.zeros(1)
    accepted = 0
    for _ in range(1000):
        x, acc = mh_step(x, Flat(), prop, rng)
        accepted += acc
    assert accepted == 1000


def test_rwm_gaussian_acceptance_regime():
    kernel = RwmKernel(GaussianTarget([0.0]), RwmConfig.isotropic(2.4, 1))
    _, stats = chain_run(kernel, np.zeros(1), 10_000, rng=np.random.default_rng(2))
    assert 0.3 <= stats.acceptance_rate <= 0.6


def test_rwm_out_of_bounds_rejected():
    rng = np.random.default_rng(3)
    target = Flat(bounds=[[0.0, 1e-9]])
    rejected = [not rwm_step(np.array([0.0]), target, RwmConfig.isotropic(10.0, 1), rng)[1] for _ in range(50)]
    assert all(rejected)


def test_rwm_config_requires_positive_definite():
    with pytest.raises(np.linalg.LinAlgError):
        RwmConfig(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_leapfrog_energy_bound_on_oscillator():
    eps = 0.1
    target = harmonic_oscillator()
    xs, ps, div = leapfrog([1.0], [0.5], target, eps, 1000)
    assert not div
    h = np.array([hamiltonian(target, x, p) for x, p in zip(xs, ps)])
    assert np.max(np.abs(h - h[0])) < 10 * eps**2


def test_leapfrog_reversible():
    target = GaussianTarget([1.0, -2.0], [[1.0, 0.3], [0.3, 0.5]])
    xs, ps, _ = leapfrog([0.2, 0.1], [0.7, -1.1], target, 0.05, 40)
    back, _, _ = leapfrog(xs[-1], -ps[-1], target, 0.05, 40)
    assert np.max(np.abs(back[-1] - [0.2, 0.1])) < 1e-10


def test_leapfrog_stationary_point():
    xs, ps, _ = leapfrog([0.0], [0.0], harmonic_oscillator(), 0.1, 20)
    assert np.all(xs == 0.0) and np.all(ps == 0.0)


def test_energy_error_second_order():
    target = harmonic_oscillator()

    def max_dh(eps):
        xs, ps, _ = leapfrog([1.0], [0.0], target, eps, int(round(10 / eps)))
        h = np.array([hamiltonian(target, x, p) for x, p in zip(xs, ps)])
        return np.max(np.abs(h - h[0]))

    assert 3.5 <= max_dh(0.1) / max_dh(0.05) <= 4.5


def test_reflection_preserves_kinetic_energy():
    rng = np.random.default_rng(4)
    bounds = np.array([[0.0, 1.0], [-2.0, 2.0]])
    inv_mass = np.array([1.0, 0.25])
    for _ in range(100):
        x = rng.uniform(-5, 5, 2)
        p = rng.normal(size=2)
        x2, p2 = reflect(x, p, bounds)
        assert np.all((x2 >= bounds[:, 0]) & (x2 <= bounds[:, 1]))
        assert kinetic(p2, inv_mass) == kinetic(p, inv_mass)


def test_hmc_zero_steps_always_accepts():
    cfg = HmcConfig(step_size=0.1, path_length=0, fallback=False)
    rng = np.random.default_rng(5)
    for _ in range(20):
        _, info = hmc_step(np.array([0.4]), harmonic_oscillator(), cfg, rng)
        assert info["accepted"] and info["accept_prob"] == pytest.approx(1.0)


def test_hmc_divergence_keeps_state():
    target = GaussianTarget([0.0], [[1e-4]])
    cfg = HmcConfig(step_size=10.0, path_length=10, fallback=False)
    x, info = hmc_step(np.array([0.01]), target, cfg, np.random.default_rng(6))
    assert info["divergent"] and not info["accepted"] and x[0] == 0.01


def test_hmc_gaussian6d_short_run():
    cfg = HmcConfig(step_size=0.05, path_length=30)
    samples, stats = chain_run(HmcKernel(gaussian_6d(), cfg), np.zeros(6), 300, rng=np.random.default_rng(7))
    assert stats.acceptance_rate >= 0.95
    assert np.max(np.abs(samples[-100:].mean(axis=0) - gaussian_6d().mean)) < 0.5


@pytest.mark.parametrize("variant", ["last_state", "uniform", "progressive_biased", "nuts"])
def test_variants_sample_standard_gaussian(variant):
    cfg = HmcConfig(step_size=0.3, path_length=8, variant=variant)
    samples, _ = chain_run(HmcKernel(GaussianTarget([0.0]), cfg), np.zeros(1), 3000, burn_in=100,
                           rng=np.random.default_rng(8))
    assert abs(samples.mean()) < 0.15
    assert samples.var() == pytest.approx(1.0, rel=0.15)


def test_nuts_depth_on_standard_gaussian():
    cfg = HmcConfig(step_size=0.1, variant="nuts")
    kernel = HmcKernel(GaussianTarget([0.0]), cfg)
    _, stats = chain_run(kernel, np.zeros(1), 1000, rng=np.random.default_rng(9))
    depths = np.array(stats.tree_depths)
    assert depths.size == 1000
    assert np.mean(depths <= 5) >= 0.99


def test_nuts_step_forces_variant():
    x, info = nuts_step(np.zeros(1), GaussianTarget([0.0]), HmcConfig(step_size=0.2), np.random.default_rng(1))
    assert "depth" in info and x.shape == (1,)


def test_hmc_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.1, variant="slice")
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.1, max_tree_depth=17)


def test_chain_run_burn_in_and_thin():
    kernel = RwmKernel(GaussianTarget([0.0]), RwmConfig.isotropic(1.0, 1))
    s, st = chain_run(kernel, np.zeros(1), 10, rng=np.random.default_rng(0))
    assert s.shape == (10, 1) and st.proposals == 10
    s, st = chain_run(kernel, np.zeros(1), 10, burn_in=10, rng=np.random.default_rng(0))
    assert s.shape == (0, 1) and st.proposals == 10
    s, _ = chain_run(kernel, np.zeros(1), 10, burn_in=2, thin=3, rng=np.random.default_rng(0))
    assert s.shape == (3, 1)


def test_parallel_chains_consistent():
    kernel = RwmKernel(GaussianTarget([1.0]), RwmConfig.isotropic(2.4, 1))
    means = []
    for seed in range(4):
        s, _ = chain_run(kernel, np.ones(1), 4000, burn_in=200, rng=np.random.default_rng(seed))
        means.append(s.mean())
    assert len(set(means)) == 4
    assert np.ptp(means) < 0.3


def test_chain_stats_acceptance_bound():
    st = ChainStats()
    st.record({"accepted": np.array([True, False, True])})
    assert st.accepts <= st.proposals and st.acceptance_rate == pytest.approx(2 / 3)


def test_last_state_detailed_balance_on_grid():
    # bin the chain into three cells and compare forward and backward transition counts
    cfg = HmcConfig(step_size=0.4, path_length=3, fallback=False)
    samples, _ = chain_run(HmcKernel(GaussianTarget([0.0]), cfg), np.zeros(1), 20_000, rng=np.random.default_rng(11))
    cells = np.digitize(samples[:, 0], [-0.43, 0.43])
    counts = np.zeros((3, 3))
    np.add.at(counts, (cells[:-1], cells[1:]), 1)
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = counts[i, j], counts[j, i]
            assert abs(a - b) < 4 * np.sqrt(a + b + 1)


def test_nuts_sample_lies_on_start_orbit():
    # by reversibility, replaying from the sample with its momentum then passes back through the start
    from qbayes.mcmc import _tree_step

    target = GaussianTarget([0.0])
    cfg = HmcConfig(step_size=0.1, variant="nuts")
    rng = np.random.default_rng(12)
    for k in range(50):
        x0, p0 = rng.normal(size=1), rng.normal(size=1)
        sign = 1 if k % 2 else -1
        x, info = _tree_step(x0, target, cfg, rng, directions=[sign] * cfg.max_tree_depth, momentum=p0)
        xs, _, _ = leapfrog(x0, sign * p0, target, 0.1, info["n_steps"])
        assert np.min(np.abs(xs[:, 0] - x[0])) < 1e-12
