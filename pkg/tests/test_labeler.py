import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccil import nn
from ccil.dynamics import ResidualDynamics, TrajectoryDataset, Transition
from ccil.envs import collect, make_env, scripted_expert
from ccil.exceptions import ConfigurationError, InputError
from ccil.labeler import (CorrectiveLabel, FilterConfig, LabelFilter, filter_labels, gen_labels,
                          label_error_cdf, read_labels, write_labels)


def _labels_from_bounds(bounds, traj=None):
    traj = traj or [0] * len(bounds)
    return [CorrectiveLabel(np.zeros(1), np.zeros(1), (k, t), 1.0, float(b), float(b))
            for t, (k, b) in enumerate(zip(traj, bounds))]


def _accepted_bounds(labels, q):
    acc, _ = filter_labels(labels, FilterConfig(quantile=q))
    return sorted(lab.error_bound for lab in acc)


@pytest.fixture(scope="module")
def wallgrasp_labels():
    env = make_env("wallgrasp")
    data = collect(env, scripted_expert(env), 3, seed=0)
    model = ResidualDynamics(epochs=60, seed=0).fit(*data.xy())
    return data, model, gen_labels(model, data)


def _linear_model(A, B):
    net = nn.Mlp([np.hstack([A, B])], [np.zeros(A.shape[0])], activation="identity")
    return ResidualDynamics.from_network(net, A.shape[0])


def _small_dataset(seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(3):
        s = rng.standard_normal(2)
        traj = []
        for _ in range(4):
            s_next = s + rng.normal(0, 0.1, 2)
            traj.append(Transition(s, rng.standard_normal(1), s_next))
            s = s_next
        trajs.append(traj)
    return TrajectoryDataset(trajs)


# -- generation ----------------------------------------------------------------

def test_zero_model_gives_zero_labels():
    data = _small_dataset()
    labels = gen_labels(_linear_model(np.zeros((2, 2)), np.zeros((2, 1))), data)
    for lab, s in zip(labels, data.states):
        assert np.array_equal(lab.s_g, s)
        assert lab.label_distance == 0.0 and lab.error_bound == 0.0


def test_linear_model_closed_form():
    A, B = np.array([[0.1, -0.2], [0.3, 0.05]]), np.array([[0.5], [-1.0]])
    data = _small_dataset(1)
    labels = gen_labels(_linear_model(A, B), data)
    for lab, s, a in zip(labels, data.states, data.actions):
        np.testing.assert_allclose(lab.s_g, s - A @ s - B @ a, rtol=1e-12, atol=1e-15)
        assert lab.lipschitz == pytest.approx(np.linalg.norm(A, 2), rel=1e-12)
        assert lab.error_bound == pytest.approx(lab.lipschitz * lab.label_distance, rel=1e-12)


def test_backtrack_residual_linear_equality():
    A, B = np.array([[0.1, -0.2], [0.3, 0.05]]), np.array([[0.5], [-1.0]])
    model = _linear_model(A, B)
    data = _small_dataset(2)
    for lab, s, a in zip(gen_labels(model, data), data.states, data.actions):
        f_star = A @ s + B @ a
        resid = lab.s_g + model.predict_residual(np.concatenate([lab.s_g, lab.a_g])) - s
        assert np.linalg.norm(resid) == pytest.approx(np.linalg.norm(A @ f_star), rel=1e-9, abs=1e-15)
        assert np.linalg.norm(resid) <= lab.error_bound + 1e-12


def test_one_label_per_transition_with_provenance(wallgrasp_labels):
    data, model, labels = wallgrasp_labels
    assert len(labels) == len(data)
    X, _ = data.xy()
    for lab, (k, t) in zip(labels, data.index):
        assert lab.source_index == (k, t)
        tr = data.trajectories[k][t]
        assert np.array_equal(lab.a_g, tr.a)
        recomputed = tr.s - model.predict_residual(np.concatenate([tr.s, tr.a]))
        assert np.array_equal(recomputed, lab.s_g)


def test_dimension_mismatch(wallgrasp_labels):
    _, model, _ = wallgrasp_labels
    with pytest.raises(InputError):
        gen_labels(model, _small_dataset())


# -- filtering -------------------------------------------------------------------

def test_quantile_half_of_one_to_ten():
    assert _accepted_bounds(_labels_from_bounds(range(1, 11)), 0.5) == [1, 2, 3, 4, 5]


def test_quantile_zero_accepts_none():
    assert _accepted_bounds(_labels_from_bounds(range(1, 11)), 0.0) == []


def test_quantile_one_accepts_all():
    assert _accepted_bounds(_labels_from_bounds(range(1, 11)), 1.0) == list(range(1, 11))


def test_tie_at_cut_rejects_whole_group():
    assert _accepted_bounds(_labels_from_bounds([1, 2, 3, 3, 3, 6]), 0.5) == [1, 2]


def test_threshold_mode():
    labels = _labels_from_bounds([0.5, 1.0, 1.5])
    acc, rej = filter_labels(labels, FilterConfig(threshold=1.0))
    assert [lab.error_bound for lab in acc] == [0.5]
    assert all(lab.accepted is False for lab in rej)


def test_filter_config_validation():
    with pytest.raises(InputError):
        FilterConfig(quantile=1.5)
    with pytest.raises(InputError):
        FilterConfig(quantile=-0.1)
    with pytest.raises(ConfigurationError):
        FilterConfig()
    with pytest.raises(ConfigurationError):
        FilterConfig(quantile=0.5, threshold=1.0)


def test_empty_labels():
    with pytest.raises(InputError):
        filter_labels([], FilterConfig(quantile=0.5))


def test_non_finite_state_rejected():
    labels = _labels_from_bounds([0.1, 0.2, 0.3])
    labels[0].s_g = np.array([np.nan])
    acc, _ = filter_labels(labels, FilterConfig(quantile=1.0))
    assert [lab.error_bound for lab in acc] == [0.2, 0.3]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1))
def test_filter_monotone_in_quantile(bounds, q1, q2):
    q1, q2 = sorted((q1, q2))
    f1 = LabelFilter(quantile=q1).fit(bounds).accepted_
    f2 = LabelFilter(quantile=q2).fit(bounds).accepted_
    assert not np.any(f1 & ~f2)
    assert f2.sum() <= math.ceil(q2 * len(bounds) - 1e-9)


def test_label_filter_predict_matches_fit():
    b = np.array([3.0, 1.0, 2.0, 5.0])
    f = LabelFilter(quantile=0.5).fit(b)
    assert np.array_equal(f.predict(b), f.accepted_)


# -- CDF and files ------------------------------------------------------------------

def test_cdf_median_of_four():
    assert label_error_cdf(_labels_from_bounds([4, 1, 3, 2]))["quantiles"]["0.5"] == 2.5


def test_cdf_all_equal_is_step():
    cdf = label_error_cdf(_labels_from_bounds([2.0] * 4))
    assert cdf["bounds"] == [2.0] * 4
    assert cdf["cdf"] == [0.25, 0.5, 0.75, 1.0]


def test_cdf_monotone(wallgrasp_labels):
    cdf = label_error_cdf(wallgrasp_labels[2])
    assert np.all(np.diff(cdf["bounds"]) >= 0) and np.all(np.diff(cdf["cdf"]) > 0)


def test_label_file_round_trip(tmp_path, wallgrasp_labels):
    _, _, labels = wallgrasp_labels
    filter_labels(labels, FilterConfig(quantile=0.8))
    path = tmp_path / "labels.jsonl"
    write_labels(labels, path)
    back = read_labels(path)
    assert len(back) == len(labels)
    for a, b in zip(labels, back):
        assert np.array_equal(a.s_g, b.s_g) and np.array_equal(a.a_g, b.a_g)
        assert a.error_bound == b.error_bound and a.accepted == b.accepted
        assert a.source_index == b.source_index and a.contact == b.contact


def test_read_labels_errors(tmp_path):
    with pytest.raises(InputError):
        read_labels(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"s": [1]}\n')
    with pytest.raises(InputError, match="bad label"):
        read_labels(bad)
