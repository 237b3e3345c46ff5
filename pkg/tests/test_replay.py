import numpy as np
import pytest

from uoep.replay import ReplayBuffer, Transition, UnderfilledError


def tr(k, dim=3, actor=0):
    return Transition(np.full(dim, float(k)), np.full(2, -float(k)), np.arange(4) + k,
                      np.array([1, 0, 0, 1], dtype=np.int8), 0.1 * (k % 5) - 0.2,
                      np.full(dim, k + 0.5), k % 7 == 0, actor)


def test_push_into_empty():
    buf = ReplayBuffer(10)
    buf.push(tr(1))
    assert len(buf) == 1 and buf.insertions == 1


def test_fifo_eviction():
    buf = ReplayBuffer(2)
    for k in (1, 2, 3):
        buf.push(tr(k))
    assert buf.contents().states[:, 0].tolist() == [2.0, 3.0]


def test_counting():
    buf = ReplayBuffer(500)
    for k in range(1000):
        buf.push(tr(k))
    assert len(buf) == 500 and buf.insertions == 1000
    assert buf.contents().states[:, 0].tolist() == list(map(float, range(500, 1000)))


def test_single_element_sample():
    buf = ReplayBuffer(4)
    buf.push(tr(7, actor=2))
    b = buf.sample_minibatch(1, np.random.default_rng(0))
    row = b.row(0)
    assert row.state[0] == 7.0 and row.actor_id == 2 and row.done
    assert row.items.tolist() == [7, 8, 9, 10]
    np.testing.assert_array_equal(buf.sample_states(1, np.random.default_rng(0)), [tr(7).state])


def test_deterministic_sampling():
    buf = ReplayBuffer(50)
    for k in range(30):
        buf.push(tr(k))
    a = buf.sample_minibatch(16, np.random.default_rng(3))
    b = buf.sample_minibatch(16, np.random.default_rng(3))
    assert a.states.tobytes() == b.states.tobytes()
    assert a.rewards.tobytes() == b.rewards.tobytes()


def test_uniform_frequencies():
    buf = ReplayBuffer(4)
    for k in range(4):
        buf.push(tr(k))
    n = 100_000
    r = np.random.default_rng(1)
    idx = np.concatenate([buf.sample_minibatch(4, r).states[:, 0] for _ in range(n // 4)])
    idx = idx.astype(int)
    freq = np.bincount(idx, minlength=4) / n
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(freq - 0.25) < 3 * sigma)


def test_state_mean_converges():
    buf = ReplayBuffer(20)
    r = np.random.default_rng(0)
    for k in range(20):
        buf.push(Transition(r.normal(size=3), np.zeros(2), np.arange(4), np.zeros(4), 0.0,
                            np.zeros(3), False, 0))
    live = buf.contents().states
    r = np.random.default_rng(2)
    drawn = np.concatenate([buf.sample_states(20, r) for _ in range(5000)])
    assert np.abs(drawn.mean(axis=0) - live.mean(axis=0)).max() < 1e-2


def test_samples_only_live_rows():
    buf = ReplayBuffer(5)
    for k in range(12):
        buf.push(tr(k))
    r = np.random.default_rng(0)
    drawn = np.concatenate([buf.sample_minibatch(5, r).states[:, 0] for _ in range(400)])
    assert set(drawn.astype(int).tolist()) == {7, 8, 9, 10, 11}


def test_underfilled():
    buf = ReplayBuffer(5)
    buf.push(tr(0))
    with pytest.raises(UnderfilledError):
        buf.sample_minibatch(2, np.random.default_rng(0))
    with pytest.raises(UnderfilledError):
        buf.sample_states(2, np.random.default_rng(0))
    with pytest.raises(UnderfilledError):
        ReplayBuffer(3).contents()
    with pytest.raises(ValueError):
        ReplayBuffer(0)
