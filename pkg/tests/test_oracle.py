import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from cotrain_lab.errors import (
    ConfigError,
    NumericError,
    ShapeError,
)
from cotrain_lab.oracle import (
    LabeledDataset,
    MixtureOracle,
    domain_weight,
    median_bandwidth,
    mixture_score,
    posterior_weights,
    relative_weight_ratio,
)
from cotrain_lab.schedule import NoiseSchedule, alpha_sigma

from conftest import random_dataset

SCH = NoiseSchedule()


def brute_force_weights(data, w, t, a_t, z=None, bandwidth=None):
    """Independent density-based evaluation of the posterior weights."""
    alpha, sigma = alpha_sigma(SCH, t)
    n = data.obs.shape[0]
    dens = np.array([
        multivariate_normal(mean=alpha * data.actions[i],
                            cov=sigma ** 2 * np.eye(data.d_act)).pdf(a_t)
        for i in range(n)
    ])
    w_k = np.where(data.is_target, w / max(data.n_target, 1),
                   (1 - w) / max(data.m_source, 1))
    weights = dens * w_k
    if z is not None:
        kern = np.exp(-((data.obs - z) ** 2).sum(axis=1) / (2 * bandwidth ** 2))
        weights = weights * kern
    return weights / weights.sum()


def brute_force_score(data, w, t, a_t, z=None, bandwidth=None):
    """Eq.-style conditional-expectation form computed from raw densities."""
    g = brute_force_weights(data, w, t, a_t, z, bandwidth)
    alpha, sigma = alpha_sigma(SCH, t)
    posterior_mean = g @ data.actions
    return (alpha * posterior_mean - a_t) / sigma ** 2


def test_posterior_matches_bruteforce_densities():
    rng = np.random.default_rng(42)
    data = random_dataset(rng, n_target=3, m_source=5)
    oracle = MixtureOracle(data=data, w=0.3, schedule=SCH)
    a_t = rng.standard_normal(2)
    pw = posterior_weights(oracle, a_t, 0.4)
    expected = brute_force_weights(data, 0.3, 0.4, a_t)
    assert np.allclose(pw.g, expected, atol=1e-12)


def test_posterior_softmax_symmetry():
    # one target and one source point, w tuned so both raw masses are equal
    data = LabeledDataset(
        obs=np.zeros((2, 1)),
        actions=np.array([[1.0, 0.0], [-1.0, 0.0]]),
        is_target=np.array([True, False]),
    )
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    pw = posterior_weights(oracle, np.zeros(2), 0.5)  # equidistant
    assert pw.g == pytest.approx([0.5, 0.5], abs=1e-12)


def test_w_one_zeroes_source_mass():
    rng = np.random.default_rng(1)
    data = random_dataset(rng, n_target=2, m_source=4)
    oracle = MixtureOracle(data=data, w=1.0, schedule=SCH)
    pw = posterior_weights(oracle, rng.standard_normal(2), 0.3)
    assert np.all(pw.g[~data.is_target] == 0.0)
    assert pw.domain_weight_target == 1.0


def test_weight_normalization_invariants():
    rng = np.random.default_rng(2)
    for trial in range(25):
        data = random_dataset(rng, n_target=int(rng.integers(1, 6)),
                              m_source=int(rng.integers(1, 8)))
        w = float(rng.uniform(0, 1))
        oracle = MixtureOracle(data=data, w=w, schedule=SCH)
        t = float(rng.uniform(SCH.t_min, SCH.t_max))
        pw = posterior_weights(oracle, rng.standard_normal(2), t)
        assert pw.g.sum() == pytest.approx(1.0, abs=1e-10)
        assert (pw.g >= 0).all()
        assert pw.domain_weight_target + pw.domain_weight_source == pytest.approx(1.0, abs=1e-10)
        assert pw.domain_weight_target == pytest.approx(pw.g[data.is_target].sum(), abs=1e-12)


def test_mixture_score_single_point():
    a0 = np.array([0.4, -1.2])
    data = LabeledDataset(obs=np.zeros((1, 1)), actions=a0[None, :],
                          is_target=np.array([True]))
    oracle = MixtureOracle(data=data, w=1.0, schedule=SCH)
    a_t = np.array([1.0, 1.0])
    alpha, sigma = alpha_sigma(SCH, 0.6)
    assert np.allclose(mixture_score(oracle, a_t, 0.6),
                       (alpha * a0 - a_t) / sigma ** 2, rtol=1e-12)


def test_mixture_score_matches_bruteforce_posterior_mean():
    rng = np.random.default_rng(3)
    data = random_dataset(rng, n_target=2, m_source=4)
    oracle = MixtureOracle(data=data, w=0.3, schedule=SCH)
    a_t = rng.standard_normal(2)
    assert np.allclose(mixture_score(oracle, a_t, 0.4),
                       brute_force_score(data, 0.3, 0.4, a_t), atol=1e-10)


def test_endpoints_reduce_to_single_domain():
    rng = np.random.default_rng(4)
    data = random_dataset(rng, n_target=3, m_source=4)
    tgt_only = LabeledDataset(obs=data.obs[data.is_target],
                              actions=data.actions[data.is_target],
                              is_target=np.ones(3, bool))
    src_only = LabeledDataset(obs=data.obs[~data.is_target],
                              actions=data.actions[~data.is_target],
                              is_target=np.zeros(4, bool))
    a_t = rng.standard_normal(2)
    s1 = mixture_score(MixtureOracle(data=data, w=1.0, schedule=SCH), a_t, 0.5)
    s1_ref = mixture_score(MixtureOracle(data=tgt_only, w=1.0, schedule=SCH), a_t, 0.5)
    assert np.array_equal(s1, s1_ref)
    s0 = mixture_score(MixtureOracle(data=data, w=0.0, schedule=SCH), a_t, 0.5)
    s0_ref = mixture_score(MixtureOracle(data=src_only, w=0.0, schedule=SCH), a_t, 0.5)
    assert np.array_equal(s0, s0_ref)


def test_form_equivalence_random_instances():
    # softmax form vs the domain-decomposed mixture form w_t*s_t + w_s*s_s
    rng = np.random.default_rng(5)
    for _ in range(50):
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        d_act = int(rng.integers(1, 5))
        data = LabeledDataset(
            obs=rng.standard_normal((n + m, 3)),
            actions=rng.standard_normal((n + m, d_act)),
            is_target=np.arange(n + m) < n,
        )
        w = float(rng.uniform(0.05, 0.95))
        t = float(rng.uniform(0.1, 0.95))
        a_t = rng.standard_normal(d_act)
        oracle = MixtureOracle(data=data, w=w, schedule=SCH)
        softmax_form = mixture_score(oracle, a_t, t)

        w_hat = domain_weight(oracle, a_t, t)
        tgt = LabeledDataset(obs=data.obs[data.is_target],
                             actions=data.actions[data.is_target],
                             is_target=np.ones(n, bool))
        src = LabeledDataset(obs=data.obs[~data.is_target],
                             actions=data.actions[~data.is_target],
                             is_target=np.zeros(m, bool))
        s_t = mixture_score(MixtureOracle(data=tgt, w=1.0, schedule=SCH), a_t, t)
        s_s = mixture_score(MixtureOracle(data=src, w=0.0, schedule=SCH), a_t, t)
        mixture_form = w_hat * s_t + (1 - w_hat) * s_s
        denom = max(np.linalg.norm(softmax_form), 1e-12)
        assert np.linalg.norm(softmax_form - mixture_form) / denom < 1e-8


def test_domain_weight_symmetric_case():
    data = LabeledDataset(
        obs=np.zeros((2, 1)),
        actions=np.array([[1.0, 0.0], [-1.0, 0.0]]),
        is_target=np.array([True, False]),
    )
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    assert domain_weight(oracle, np.zeros(2), 0.5) == pytest.approx(0.5, abs=1e-12)


def test_domain_weight_w_one():
    rng = np.random.default_rng(6)
    data = random_dataset(rng)
    oracle = MixtureOracle(data=data, w=1.0, schedule=SCH)
    assert domain_weight(oracle, rng.standard_normal(2), 0.5) == 1.0


def test_domain_weight_heavy_noise_matches_bruteforce():
    # two well-separated clusters; at large t the densities nearly coincide
    rng = np.random.default_rng(7)
    n, m = 4, 4
    data = LabeledDataset(
        obs=np.zeros((n + m, 1)),
        actions=np.concatenate([rng.normal(5.0, 0.1, (n, 2)),
                                rng.normal(-5.0, 0.1, (m, 2))]),
        is_target=np.arange(n + m) < n,
    )
    w = 0.3
    oracle = MixtureOracle(data=data, w=w, schedule=SCH)
    a_t = np.array([0.1, -0.2])
    got = domain_weight(oracle, a_t, 0.999)
    expected = brute_force_weights(data, w, 0.999, a_t)[data.is_target].sum()
    assert got == pytest.approx(expected, abs=1e-10)
    # heavy noise: p_t ~ p_s, so the weight collapses to w itself (N = M)
    assert abs(got - w) < 0.05


def test_domain_weight_near_one_at_small_t_on_target_point():
    rng = np.random.default_rng(8)
    data = LabeledDataset(
        obs=np.zeros((2, 1)),
        actions=np.array([[1.0, 1.0], [-1.0, -1.0]]),
        is_target=np.array([True, False]),
    )
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    alpha, _ = alpha_sigma(SCH, SCH.t_min)
    assert domain_weight(oracle, alpha * data.actions[0], SCH.t_min) > 0.99


def test_conditional_gating_disjoint_observations():
    rng = np.random.default_rng(9)
    n, m = 4, 6
    obs = np.concatenate([np.zeros((n, 3)), 100.0 + rng.standard_normal((m, 3))])
    data = LabeledDataset(obs=obs, actions=rng.standard_normal((n + m, 2)),
                          is_target=np.arange(n + m) < n)
    h = 1.0
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH,
                           kernel="gaussian-rbf", bandwidth=h)
    # query observation sits on the target cluster, > 10h from all source obs
    w_hat = domain_weight(oracle, rng.standard_normal(2), 0.5, z=np.zeros(3))
    assert w_hat > 0.999


def test_conditional_matches_bruteforce_with_kernel():
    rng = np.random.default_rng(10)
    data = random_dataset(rng, n_target=3, m_source=4)
    oracle = MixtureOracle(data=data, w=0.4, schedule=SCH,
                           kernel="gaussian-rbf", bandwidth=0.8)
    a_t = rng.standard_normal(2)
    z = rng.standard_normal(3)
    pw = posterior_weights(oracle, a_t, 0.5, z=z)
    expected = brute_force_weights(data, 0.4, 0.5, a_t, z=z, bandwidth=0.8)
    assert np.allclose(pw.g, expected, atol=1e-12)


def test_median_bandwidth_default():
    rng = np.random.default_rng(11)
    data = random_dataset(rng)
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH, kernel="gaussian-rbf")
    assert oracle.bandwidth == pytest.approx(median_bandwidth(data.obs))
    assert oracle.bandwidth > 0


def test_relative_weight_ratio_natural_ratio_special_case():
    # r_t = r_s and w = w_n = N/(N+M) gives ratio exactly 1
    rng = np.random.default_rng(12)
    n, m = 3, 9
    actions = np.zeros((n + m, 2))
    actions[:, 0] = np.concatenate([np.ones(n), -np.ones(m)])
    data = LabeledDataset(obs=np.zeros((n + m, 1)), actions=actions,
                          is_target=np.arange(n + m) < n)
    w_n = n / (n + m)
    oracle = MixtureOracle(data=data, w=w_n, schedule=SCH)
    ratio = relative_weight_ratio(oracle, 0, n, np.zeros(2), 0.5)
    assert ratio == pytest.approx(1.0, rel=1e-12)


def test_relative_weight_ratio_full_symmetry():
    data = LabeledDataset(
        obs=np.zeros((2, 1)),
        actions=np.array([[1.0, 0.0], [-1.0, 0.0]]),
        is_target=np.array([True, False]),
    )
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    assert relative_weight_ratio(oracle, 0, 1, np.zeros(2), 0.5) == pytest.approx(1.0)


def test_relative_weight_ratio_size_scaling():
    # N=50, M=3000, w=0.1, equal radii -> (0.1/50)/(0.9/3000) = 6.666...
    n, m = 50, 3000
    actions = np.zeros((n + m, 2))
    actions[:n, 0] = 1.0
    actions[n:, 0] = -1.0
    data = LabeledDataset(obs=np.zeros((n + m, 1)), actions=actions,
                          is_target=np.arange(n + m) < n)
    oracle = MixtureOracle(data=data, w=0.1, schedule=SCH)
    ratio = relative_weight_ratio(oracle, 0, n, np.zeros(2), 0.5)
    assert ratio == pytest.approx(6.666666666666667, rel=1e-12)


def test_relative_weight_ratio_infinite_when_source_weightless():
    rng = np.random.default_rng(13)
    data = random_dataset(rng, n_target=2, m_source=2)
    oracle = MixtureOracle(data=data, w=1.0, schedule=SCH)
    assert relative_weight_ratio(oracle, 0, 2, np.zeros(2), 0.5) == np.inf


def test_relative_weight_ratio_index_validation():
    rng = np.random.default_rng(14)
    data = random_dataset(rng, n_target=2, m_source=2)
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    with pytest.raises(ConfigError):
        relative_weight_ratio(oracle, 2, 3, np.zeros(2), 0.5)
    with pytest.raises(ConfigError):
        relative_weight_ratio(oracle, 0, 1, np.zeros(2), 0.5)


def test_oracle_config_errors():
    rng = np.random.default_rng(15)
    only_target = LabeledDataset(obs=np.zeros((2, 1)), actions=np.zeros((2, 2)),
                                 is_target=np.ones(2, bool))
    with pytest.raises(ConfigError):
        MixtureOracle(data=only_target, w=0.0, schedule=SCH)
    only_source = LabeledDataset(obs=np.zeros((2, 1)), actions=np.zeros((2, 2)),
                                 is_target=np.zeros(2, bool))
    with pytest.raises(ConfigError):
        MixtureOracle(data=only_source, w=1.0, schedule=SCH)
    data = random_dataset(rng)
    with pytest.raises(ConfigError):
        MixtureOracle(data=data, w=1.5, schedule=SCH)
    with pytest.raises(ConfigError):
        MixtureOracle(data=data, w=0.5, schedule=SCH, kernel="gaussian-rbf",
                      bandwidth=-1.0)


def test_non_finite_query_rejected():
    rng = np.random.default_rng(16)
    data = random_dataset(rng)
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    with pytest.raises(NumericError):
        mixture_score(oracle, np.array([np.nan, 0.0]), 0.5)


def test_z_requires_rbf_kernel():
    rng = np.random.default_rng(17)
    data = random_dataset(rng)
    oracle = MixtureOracle(data=data, w=0.5, schedule=SCH)
    with pytest.raises(ConfigError):
        domain_weight(oracle, np.zeros(2), 0.5, z=np.zeros(3))


def test_batched_queries_match_single():
    rng = np.random.default_rng(18)
    data = random_dataset(rng)
    oracle = MixtureOracle(data=data, w=0.4, schedule=SCH)
    queries = rng.standard_normal((5, 2))
    batch = mixture_score(oracle, queries, 0.5)
    for i in range(5):
        assert np.allclose(batch[i], mixture_score(oracle, queries[i], 0.5), rtol=1e-14)


def test_duplicated_points_double_mass():
    base = LabeledDataset(obs=np.zeros((2, 1)),
                          actions=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                          is_target=np.array([True, False]))
    doubled = LabeledDataset(
        obs=np.zeros((3, 1)),
        actions=np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]),
        is_target=np.array([True, True, False]),
    )
    a_t = np.array([0.3, 0.1])
    w1 = domain_weight(MixtureOracle(data=base, w=0.5, schedule=SCH), a_t, 0.5)
    w2 = domain_weight(MixtureOracle(data=doubled, w=0.5, schedule=SCH), a_t, 0.5)
    # duplicates share the per-domain w/N budget: the domain weight is unchanged
    assert w2 == pytest.approx(w1, rel=1e-12)
