import numpy as np
import pytest

from fosp import datastore, envs
from fosp.datastore import (DataFormatError, ReplayBuffer, SamplingError, TrajectoryFile, generate_dataset,
                            make_trajectory, pad_terminal, sample_batch)

# 0.99 quantile of chi-square with 15 degrees of freedom
CHI2_15_Q99 = 30.578


def _line(L, tag=7, terminal=False):
    space = envs.ActionSpace("discrete", n=4)
    xs = np.arange(L, dtype=float)[:, None] * np.ones((1, 3))
    terms = [False] * (L - 1) + [terminal]
    return make_trajectory(space, xs, [i % 4 for i in range(L - 1)], np.linspace(0, 1, L), [0.0] * L, terms, tag)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(envs.hazard_grid(), (5, 5, 5), seed=0)


def test_generate_counts_and_tags(dataset):
    assert len(dataset.trajectories) == 15
    assert sorted(set(dataset.tags)) == [0, 1, 2]
    assert [dataset.tags.count(t) for t in (0, 1, 2)] == [5, 5, 5]
    single = generate_dataset(envs.hazard_grid(), (0, 0, 1), seed=3)
    assert single.tags == [datastore.BEHAVIOR_TAGS["random"]]


def test_safe_part_costs_less_than_unsafe_part(dataset):
    cost = lambda tag: np.mean([t.cost_return for t in dataset.trajectories if t.tag == tag])
    assert cost(datastore.BEHAVIOR_TAGS["safe"]) < cost(datastore.BEHAVIOR_TAGS["unsafe"])


def test_generate_rejects_infeasible_grid():
    from fosp.oracles import InfeasibleError
    with pytest.raises(InfeasibleError):
        generate_dataset(envs.hazard_grid(slip_probability=0.1), (1, 1, 0), seed=0)
    with pytest.raises(ValueError):
        generate_dataset(envs.hazard_grid(), (1, -1, 0), seed=0)


def test_record_convention(dataset):
    tr = dataset.trajectories[0]
    assert tr.is_first[0] and not tr.is_first[1:].any()
    assert tr.rewards[0] == 0.0 and tr.costs[0] == 0.0
    assert tr.actions[-1] == 0


def test_round_trip_is_byte_identical(tmp_path, dataset):
    path = tmp_path / "d.bin"
    dataset.save(path)
    back = TrajectoryFile.load(path)
    assert back.to_bytes() == path.read_bytes()
    assert back.tags == dataset.tags
    for a, b in zip(dataset.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.is_terminal, b.is_terminal)
        assert b.reward_return == pytest.approx(a.reward_return, rel=1e-5)
        assert b.cost_return == pytest.approx(a.cost_return, rel=1e-5)


def test_box_actions_round_trip():
    env = envs.PointGoalCmdp()
    data = generate_dataset(env, (0, 0, 1), seed=0)
    back = TrajectoryFile.from_bytes(data.to_bytes())
    assert back.action_kind == "box"
    np.testing.assert_allclose(back.trajectories[0].actions, data.trajectories[0].actions, rtol=1e-6)


def test_empty_file_round_trip():
    empty = datastore.empty_file(envs.hazard_grid())
    back = TrajectoryFile.from_bytes(empty.to_bytes())
    assert back.trajectories == [] and back.obs_dim == 25


def test_corrupt_files_rejected(dataset):
    raw = dataset.to_bytes()
    with pytest.raises(DataFormatError, match="offset"):
        TrajectoryFile.from_bytes(raw[:-7])
    with pytest.raises(DataFormatError, match="magic"):
        TrajectoryFile.from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataFormatError, match="version"):
        TrajectoryFile.from_bytes(raw[:8] + b"\x09\x00" + raw[10:])
    with pytest.raises(DataFormatError, match="trailing"):
        TrajectoryFile.from_bytes(raw + b"\x00")


def test_batch_shapes_and_contract(dataset):
    rng = np.random.default_rng(0)
    trajs = [pad_terminal(t, 16) for t in dataset.trajectories]
    b = sample_batch(trajs, 64, 16, rng)
    assert b["obs"].shape == (64, 16, 25)
    assert b["action"].shape == b["reward"].shape == b["is_first"].shape == (64, 16)
    for i, o, first in zip(b["traj_index"], b["offset"], b["is_first"]):
        assert o + 16 <= len(trajs[i])
        assert first[0] == (o == 0) and not first[1:].any()


def test_single_trajectory_of_length_t_forces_the_segment():
    tr = _line(6)
    b = sample_batch([tr], 3, 6, np.random.default_rng(0))
    assert (b["offset"] == 0).all()
    np.testing.assert_array_equal(b["obs"][1], tr.observations)
    assert b["action_valid"][0].tolist() == [True] * 5 + [False]


def test_too_short_raises():
    with pytest.raises(SamplingError):
        sample_batch([_line(3)], 2, 4, np.random.default_rng(0))


def test_offsets_are_uniform():
    tr = _line(20)
    b = sample_batch(ReplayBuffer([tr]), 100_000, 5, np.random.default_rng(1))
    counts = np.bincount(b["offset"], minlength=16)
    expected = 100_000 / 16
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < CHI2_15_Q99


def test_sampling_is_deterministic(dataset):
    a = sample_batch(dataset, 4, 3, np.random.default_rng(5))
    b = sample_batch(dataset, 4, 3, np.random.default_rng(5))
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_pad_terminal():
    short = _line(4, terminal=True)
    padded = pad_terminal(short, 7)
    assert len(padded) == 7
    np.testing.assert_array_equal(padded.observations[4:], np.repeat(short.observations[-1:], 3, 0))
    assert padded.is_terminal[3:].all() and not padded.is_first[1:].any()
    assert padded.reward_return == short.reward_return and padded.tag == short.tag
    truncated = _line(4, terminal=False)
    assert pad_terminal(truncated, 7) is truncated
    assert pad_terminal(short, 4) is short


def test_replay_buffer_capacity():
    buf = ReplayBuffer([_line(3, tag=i) for i in range(3)], capacity=2)
    assert len(buf) == 2 and buf.inserted == 3
    assert [t.tag for t in buf.trajectories] == [1, 2]
