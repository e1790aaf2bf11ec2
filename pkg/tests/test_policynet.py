import math

import numpy as np
import pytest

from spikenav import diffcore as dc
from spikenav import policynet as pn
from spikenav.crowdenv import CrowdEnv, stock_scenario
from spikenav.diffcore import ContractError, Tensor
from spikenav.policynet import (
    ActionBounds,
    CheckpointError,
    ObservationMatrix,
    PolicyParams,
    build_observation_matrix,
    load_checkpoint,
    log_prob_np,
    sample_action,
    save_checkpoint,
    squash,
)

BOUNDS = ActionBounds(v_max=1.0, d_max=math.pi / 6.0)


def fresh_obs(seed=0, n_humans=2):
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=n_humans + 1))
    _, (robot_obs, humans) = env.reset(seed=seed)
    return build_observation_matrix(robot_obs, humans)


def fresh_params(kind="sd", seed=0, obs_dim=23):
    return PolicyParams.init(obs_dim, kind, np.random.default_rng(seed))


# -- observation matrix -------------------------------------------------------


def test_matrix_two_humans_closest_first():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=3))
    _, (robot_obs, humans) = env.reset(seed=1)
    m = build_observation_matrix(robot_obs, humans)
    assert m.data.shape == (23, 2)
    # top block repeats the robot observation in every column
    for col in range(2):
        assert np.array_equal(m.data.data[:6, col], robot_obs.vector())
    assert m.data.data[6:, 0][2] == humans[0].blocks[0][0]  # d of closest in column 0
    assert humans[0].distance <= humans[1].distance


def test_matrix_no_humans_zero_padded_single_column():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2))
    _, (robot_obs, _) = env.reset(seed=1)
    m = build_observation_matrix(robot_obs, [], human_dim=17)
    assert m.data.shape == (23, 1)
    assert np.all(m.data.data[6:, 0] == 0.0)
    assert np.array_equal(m.data.data[:6, 0], robot_obs.vector())


def test_matrix_rejects_unsorted_then_matches_after_sort():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=4))
    _, (robot_obs, humans) = env.reset(seed=3)
    shuffled = [humans[2], humans[0], humans[1]]
    if shuffled[0].distance > shuffled[1].distance:
        with pytest.raises(ContractError):
            build_observation_matrix(robot_obs, shuffled)
    resorted = sorted(shuffled, key=lambda h: (h.distance, h.agent_index))
    m1 = build_observation_matrix(robot_obs, humans)
    m2 = build_observation_matrix(robot_obs, resorted)
    assert np.array_equal(m1.data.data, m2.data.data)


# -- actor / critic forward ----------------------------------------------------


def test_zero_network_outputs_bound_center():
    params = fresh_params("sd")
    for t in params.parameters():
        t.data[...] = 0.0
    obs = fresh_obs()
    out = pn.policy_value_forward(obs, params)
    action = out.action_mean(BOUNDS)
    assert np.allclose(action, [BOUNDS.v_max / 2.0, 0.0], atol=1e-15)
    assert out.value.item() == 0.0


@pytest.mark.parametrize("kind", ["sd", "cuba"])
def test_actor_output_bounded_even_with_duplicate_column(kind):
    params = fresh_params(kind)
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=3))
    _, (robot_obs, humans) = env.reset(seed=5)
    base = build_observation_matrix(robot_obs, humans)
    widened = ObservationMatrix(Tensor(np.hstack([base.data.data, base.data.data[:, -1:]])))
    for obs in (base, widened):
        out = pn.policy_value_forward(obs, params)
        a = out.action_mean(BOUNDS)
        assert np.all(np.isfinite(a))
        assert 0.0 <= a[0] <= BOUNDS.v_max and abs(a[1]) <= BOUNDS.d_max


@pytest.mark.parametrize("kind", ["sd", "cuba"])
def test_column_order_changes_output(kind):
    params = fresh_params(kind, seed=11)
    obs = fresh_obs(seed=2, n_humans=3)
    swapped = obs.data.data.copy()
    swapped[:, [0, -1]] = swapped[:, [-1, 0]]
    out_a = pn.actor_forward(obs, params).mean_pre_squash.data
    out_b = pn.actor_forward(ObservationMatrix(Tensor(swapped)), params).mean_pre_squash.data
    assert not np.allclose(out_a, out_b)


def test_end_to_end_spiking_path_types():
    obs = fresh_obs(seed=4)
    for kind in ("sd", "cuba"):
        out = pn.policy_value_forward(obs, fresh_params(kind, seed=1))
        assert set(out.rasters) == {"input", "sfe", "san"}
        for name in ("sfe", "san"):
            raster = out.rasters[name]
            assert raster.values.shape == (obs.width, 64)
            if kind == "cuba":
                assert raster.kind == "binary"
                assert set(np.unique(raster.values.data)) <= {0.0, 1.0}
            else:
                assert raster.kind == "graded"


def test_obs_dim_mismatch_raises():
    params = fresh_params("sd", obs_dim=23)
    bad = ObservationMatrix(Tensor(np.zeros((9, 2))))
    with pytest.raises(ContractError):
        pn.policy_value_forward(bad, params)


def test_forward_batch_matches_single():
    params = fresh_params("sd", seed=9)
    obs = fresh_obs(seed=6)
    single = pn.policy_value_forward(obs, params)
    mean_b, value_b = pn.forward_batch([obs.data.data, obs.data.data], params)
    for row in range(2):
        assert np.allclose(mean_b.data[row], single.mean_pre_squash.data[0], atol=1e-10)
        assert np.allclose(value_b.data[row], single.value.data[0], atol=1e-10)


def test_joint_gradients_reach_all_networks():
    params = fresh_params("sd", seed=3)
    obs = fresh_obs(seed=7)
    out = pn.policy_value_forward(obs, params)
    lp = pn.log_prob_graph(
        np.array([[0.2, -0.1]]), out.mean_pre_squash, params.log_std,
        BOUNDS.halves()[None, :],
    )
    loss = dc.add(dc.tsum(lp), dc.tsum(dc.mul(out.value, out.value)))
    loss.backward()
    for name in ("sfe_w", "san_w", "readout_w", "critic_w1", "critic_w3", "log_std"):
        grad = getattr(params, name).grad
        assert grad is not None and np.any(grad != 0.0), f"no gradient in {name}"


# -- action head ------------------------------------------------------------------


def test_sampling_deterministic_given_rng():
    mean = np.array([0.3, -0.2])
    log_std = np.array([-0.5, -0.3])
    a1, lp1, u1 = sample_action(mean, log_std, BOUNDS, np.random.default_rng(42))
    a2, lp2, u2 = sample_action(mean, log_std, BOUNDS, np.random.default_rng(42))
    assert np.array_equal(a1, a2) and lp1 == lp2 and np.array_equal(u1, u2)


def test_degenerate_gaussian_returns_mapped_mean():
    mean = np.array([0.4, 0.1])
    log_std = np.array([-60.0, -60.0])
    action, _, _ = sample_action(mean, log_std, BOUNDS, np.random.default_rng(0))
    assert np.allclose(action, squash(mean, BOUNDS), atol=1e-12)


def test_actions_always_inside_bounds():
    rng = np.random.default_rng(8)
    for _ in range(200):
        mean = rng.normal(scale=3.0, size=2)
        log_std = rng.uniform(-2.0, 0.5, size=2)
        action, _, _ = sample_action(mean, log_std, BOUNDS, rng)
        assert 0.0 <= action[0] <= BOUNDS.v_max
        assert -BOUNDS.d_max <= action[1] <= BOUNDS.d_max


def _normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _squashed_cdf(a, dim, mean, log_std, bounds):
    # P(action_d <= a) = Phi((atanh((a - c)/h) - mu)/sigma)
    c = bounds.centers()[dim]
    h = bounds.halves()[dim]
    u = math.atanh((a - c) / h)
    return _normal_cdf((u - mean[dim]) / math.exp(log_std[dim]))


def test_log_prob_matches_cdf_finite_difference():
    mean = np.array([0.25, -0.4])
    log_std = np.array([-0.7, -0.2])
    rng = np.random.default_rng(17)
    for _ in range(3):
        action, lp, u = sample_action(mean, log_std, BOUNDS, rng)
        eps = 1e-6
        log_pdf = 0.0
        for d in range(2):
            hi = _squashed_cdf(action[d] + eps, d, mean, log_std, BOUNDS)
            lo = _squashed_cdf(action[d] - eps, d, mean, log_std, BOUNDS)
            log_pdf += math.log((hi - lo) / (2.0 * eps))
        assert abs(lp - log_pdf) < 1e-5


def test_log_prob_graph_agrees_with_numpy():
    params = fresh_params("sd", seed=4)
    obs = fresh_obs(seed=9)
    out = pn.policy_value_forward(obs, params)
    u = np.array([[0.3, -0.6]])
    lp_graph = pn.log_prob_graph(u, out.mean_pre_squash, params.log_std, BOUNDS.halves()[None, :])
    lp_np = log_prob_np(u[0], out.mean_pre_squash.data[0], params.log_std.data, BOUNDS)
    assert abs(lp_graph.data[0] - lp_np) < 1e-12


# -- checkpoint container ------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = fresh_params("cuba", seed=13)
    path = tmp_path / "policy.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.neuron_kind == "cuba"
    assert loaded.obs_dim == params.obs_dim
    assert loaded.actor_neuron == params.actor_neuron
    for name in PolicyParams.TENSOR_FIELDS:
        assert np.array_equal(getattr(loaded, name).data, getattr(params, name).data), name
    # loaded policy computes identical outputs
    obs = fresh_obs(seed=2)
    a = pn.policy_value_forward(obs, params).mean_pre_squash.data
    b = pn.policy_value_forward(obs, loaded).mean_pre_squash.data
    assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    params = fresh_params("sd")
    path = tmp_path / "policy.ckpt"
    save_checkpoint(path, params)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_missing_file():
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/path.ckpt")
