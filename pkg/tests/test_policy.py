import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccil import nn
from ccil.dynamics import ResidualDynamics, TrajectoryDataset, Transition
from ccil.exceptions import InputError
from ccil.labeler import FilterConfig, filter_labels, gen_labels
from ccil.policy import (DEFAULT_POSE_WEIGHTS, AugmentedDataset, BCPolicy, _pose_loss, action_loss,
                         quaternion_angle, train_policy)


def _pose(x=(0, 0, 0), q=(1, 0, 0, 0), c=0.0):
    return np.array([*x, *q, c], dtype=np.float64)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


# -- action loss ---------------------------------------------------------------

def test_identical_pose_zero_loss():
    a = _pose((0.1, 0.2, 0.3), _unit([1, 2, 3, 4]), 0.7)
    assert action_loss(a, a) == pytest.approx(0.0, abs=1e-12)


def test_position_error_weighted():
    assert action_loss(_pose(), _pose((0.1, 0.1, 0.1)), DEFAULT_POSE_WEIGHTS) == pytest.approx(0.3)


def test_quaternion_double_cover():
    q = _unit([0.3, -0.2, 0.9, 0.1])
    assert quaternion_angle(q, -q) == pytest.approx(0.0, abs=1e-7)
    assert action_loss(_pose(q=q), _pose(q=-q)) == pytest.approx(0.0, abs=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(InputError):
        action_loss(_pose(), _pose(q=(0, 0, 0, 0)))


def test_known_rotation_angle():
    half = np.pi / 8
    q = np.array([np.cos(half), np.sin(half), 0, 0])
    assert quaternion_angle([1, 0, 0, 0], q) == pytest.approx(np.pi / 4, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(quats, quats)
def test_angle_range(q1, q2):
    theta = quaternion_angle(q1, q2)
    assert 0.0 <= theta <= np.pi


def test_loss_decomposition():
    rng = np.random.default_rng(0)
    t = _pose(rng.standard_normal(3), _unit(rng.standard_normal(4)), 0.5)
    p = _pose(rng.standard_normal(3), _unit(rng.standard_normal(4)), -0.2)
    parts = [action_loss(t, p, w) for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    w = (2.0, 3.0, 0.5)
    assert action_loss(t, p, w) == pytest.approx(sum(wi * pi for wi, pi in zip(w, parts)))
    p2 = p.copy()
    p2[3:] = _pose(q=_unit([1, 1, 0, 0]), c=3.0)[3:]
    assert action_loss(t, p2, (1, 0, 0)) == pytest.approx(parts[0])


def test_raw_mode_weighted_squared_error():
    assert action_loss([1.0, 2.0], [0.0, 0.0], (1.0, 0.5), "raw") == pytest.approx(3.0)
    assert action_loss([1.0, 2.0], [0.0, 0.0], None, "raw") == pytest.approx(5.0)


def test_pose_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    target = np.stack([_pose(rng.standard_normal(3), _unit(rng.standard_normal(4)), rng.standard_normal())
                       for _ in range(4)])
    pred = target + 0.3 * rng.standard_normal(target.shape)
    w = np.ones(4)
    loss_fn = _pose_loss(DEFAULT_POSE_WEIGHTS)
    _, grad = loss_fn(pred, target, w)
    h = 1e-6
    num = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        up, down = pred.copy(), pred.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (loss_fn(up, target, w)[0] - loss_fn(down, target, w)[0]) / (2 * h)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-7)


# -- training ---------------------------------------------------------------------

def test_memorises_single_pair():
    s, a = np.array([[0.3, -0.7]]), np.array([[1.5, -2.0]])
    pol = BCPolicy(hidden_sizes=(16,), epochs=300, seed=0).fit(np.repeat(s, 20, 0), np.repeat(a, 20, 0))
    assert np.abs(pol.act(s[0]) - a[0]).max() < 1e-3


def _fitted_linear_map(pol, dim, rng):
    S = rng.uniform(-1, 1, (400, dim))
    coef, *_ = np.linalg.lstsq(np.hstack([S, np.ones((400, 1))]), pol.predict(S), rcond=None)
    return coef[:dim].T


C_TRUE = np.array([[1.0, -0.5], [0.25, 2.0]])


def test_recovers_linear_expert():
    rng = np.random.default_rng(2)
    S = rng.uniform(-1, 1, (2000, 2))
    pol = BCPolicy(epochs=100, seed=0).fit(S, S @ C_TRUE.T)
    assert np.linalg.norm(_fitted_linear_map(pol, 2, rng) - C_TRUE, 2) < 0.05


def _linear_demos(rng, n_traj=40, steps=25, dt=0.2):
    # BackTrack shifts the state by f(s, a), so the label disagrees with C by C f(s, a);
    # a short step keeps that disagreement small.
    A = dt * np.array([[0.0, 0.05], [-0.05, -0.01]])
    B = dt * 0.02 * np.eye(2)
    trajs = []
    for _ in range(n_traj):
        s = rng.uniform(-1, 1, 2)
        traj = []
        for _ in range(steps):
            a = C_TRUE @ s
            s_next = s + A @ s + B @ a
            traj.append(Transition(s, a, s_next))
            s = s_next
        trajs.append(traj)
    return TrajectoryDataset(trajs)


def test_corrective_labels_keep_linear_map():
    rng = np.random.default_rng(3)
    data = _linear_demos(rng)
    dyn = ResidualDynamics(epochs=200, seed=0).fit(*data.xy())
    accepted, _ = filter_labels(gen_labels(dyn, data), FilterConfig(quantile=1.0))
    plain = train_policy(AugmentedDataset.from_labels(data), nn.TrainConfig(epochs=100))
    augmented = train_policy(AugmentedDataset.from_labels(data, accepted), nn.TrainConfig(epochs=100))
    m1 = _fitted_linear_map(plain, 2, np.random.default_rng(4))
    m2 = _fitted_linear_map(augmented, 2, np.random.default_rng(4))
    assert np.linalg.norm(m1 - m2, 2) < 0.05


def test_augmentation_is_additive():
    rng = np.random.default_rng(5)
    data = _linear_demos(rng, n_traj=3, steps=5)
    dyn = ResidualDynamics(epochs=10).fit(*data.xy())
    accepted, _ = filter_labels(gen_labels(dyn, data), FilterConfig(quantile=0.5))
    aug = AugmentedDataset.from_labels(data, accepted, generated_weight=0.5)
    X, y, w = aug.xy()
    assert len(aug) == len(X) == len(data) + len(accepted)
    assert np.array_equal(X[:len(data)], data.states)
    assert np.all(w[len(data):] == 0.5)


def test_pose_policy_outputs_unit_quaternion():
    rng = np.random.default_rng(6)
    S = rng.standard_normal((64, 3))
    Y = np.stack([_pose(s, _unit(rng.standard_normal(4)), 0.0) for s in S])
    pol = BCPolicy(action_space="pose", epochs=20, seed=0).fit(S, Y)
    out = pol.act(rng.standard_normal((10, 3)))
    np.testing.assert_allclose(np.linalg.norm(out[:, 3:7], axis=1), 1.0, atol=1e-9)
    assert pol.score(S, Y) <= 0.0


def test_act_is_pure_and_matches_forward():
    rng = np.random.default_rng(7)
    S = rng.standard_normal((50, 2))
    pol = BCPolicy(epochs=5).fit(S, S @ C_TRUE.T)
    s = rng.standard_normal(2)
    assert np.array_equal(pol.act(s), pol.act(s))
    raw = pol.y_mean_ + pol.y_scale_ * nn.forward(pol.net_, (s - pol.x_mean_) / pol.x_scale_)
    assert np.array_equal(pol.act(s), raw)


def test_training_deterministic():
    rng = np.random.default_rng(8)
    S = rng.standard_normal((50, 2))
    a = BCPolicy(epochs=10, seed=4).fit(S, S @ C_TRUE.T)
    b = BCPolicy(epochs=10, seed=4).fit(S, S @ C_TRUE.T)
    assert all(np.array_equal(p, q) for p, q in zip(a.net_.params(), b.net_.params()))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    S = rng.standard_normal((30, 3))
    Y = np.stack([_pose(s, _unit(rng.standard_normal(4)), 1.0) for s in S])
    pol = BCPolicy(action_space="pose", epochs=3).fit(S, Y)
    path = tmp_path / "pol.json"
    pol.save(path)
    back = BCPolicy.load(path)
    assert np.array_equal(back.predict(S), pol.predict(S))
    assert back.get_params() == pol.get_params()


def test_input_errors(tmp_path):
    with pytest.raises(InputError):
        BCPolicy().fit(np.empty((0, 2)), np.empty((0, 1)))
    with pytest.raises(InputError):
        BCPolicy(action_space="pose").fit(np.ones((3, 2)), np.ones((3, 5)))
    with pytest.raises(InputError):
        BCPolicy.load(tmp_path / "missing.json")
    with pytest.raises(InputError):
        train_policy(AugmentedDataset(np.empty((0, 2)), np.empty((0, 1))))
