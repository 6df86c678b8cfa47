import numpy as np
import pytest

from localq.replay import EmptyBufferError, ReplayBuffer, Transition


def tr(value, terminal=False, truncated=False, action=0):
    v = np.array([value], dtype=np.float32)
    return Transition(s=v, a=action, r=float(value), s_next=v + 1000, terminal=terminal,
                      truncated=truncated)


def push_episode(buf, start, length, truncated=False):
    for i in range(length):
        last = i == length - 1
        buf.push(tr(start + i, terminal=last and not truncated, truncated=last and truncated))


class TestPushEvict:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(2, 1)
        for v in (1, 2, 3):
            buf.push(tr(v))
        assert buf.size == 2
        stored = {float(buf._transition_at(i).r) for i in range(buf.tail, buf._count)}
        assert stored == {2.0, 3.0}

    def test_first_m_absent_after_overflow(self):
        buf = ReplayBuffer(5, 1)
        for v in range(8):
            buf.push(tr(v))
        live = {float(buf._transition_at(i).r) for i in range(buf.tail, buf._count)}
        assert live == {3.0, 4.0, 5.0, 6.0, 7.0}

    def test_lazy_growth_matches_capacity(self):
        buf = ReplayBuffer(10_000_000, 4, chunk=8)
        for _ in range(20):
            buf.push(Transition(np.zeros(4), 0, 0.0, np.zeros(4), False))
        assert buf.size == 20
        assert buf._alloc >= 20


class TestWindows:
    def test_single_step_episode_has_empty_burn_in(self):
        buf = ReplayBuffer(16, 1)
        push_episode(buf, 0, 1)
        subs = buf.sample(1, seq_len=4, rng=np.random.default_rng(0))
        assert subs[0].burn_in_len == 0
        assert len(subs[0].transitions) == 1

    def test_windows_never_cross_episode_boundary(self):
        buf = ReplayBuffer(64, 1)
        push_episode(buf, 0, 5)
        push_episode(buf, 10, 3, truncated=True)
        push_episode(buf, 20, 7)
        rng = np.random.default_rng(1)
        for sub in buf.sample(300, seq_len=4, rng=rng):
            for t in sub.transitions[:-1]:
                assert not t.terminal and not t.truncated
            # all consecutive values belong to one episode
            vals = [t.r for t in sub.transitions]
            assert all(b - a == 1 for a, b in zip(vals, vals[1:]))

    def test_orphaned_episode_suffix_excluded_until_burn_in_fits(self):
        # brute-force oracle over the push history on a 10-slot buffer
        cap, k = 10, 3
        buf = ReplayBuffer(cap, 1)
        history = []  # (value, terminal)
        for i in range(6):
            term = i == 5
            buf.push(tr(i, terminal=term))
            history.append((i, term))
        for i in range(8):
            term = i == 7
            buf.push(tr(100 + i, terminal=term))
            history.append((100 + i, term))
        # brute force: j valid iff its burn window (min(k, steps since episode
        # start)) lies fully inside the live range
        total = len(history)
        live_lo = total - min(total, cap)
        episode_start = {}
        start = 0
        for j, (_, term) in enumerate(history):
            episode_start[j] = start
            if term:
                start = j + 1
        expected = []
        for j in range(live_lo, total):
            burn = min(k, j - episode_start[j])
            if j - burn >= live_lo:
                expected.append(j)
        got = buf.valid_window_ends(k).tolist()
        assert got == expected
        # the orphaned suffix of episode one (entries 4, 5) must be excluded
        assert 4 not in got and 5 not in got

    def test_burn_in_lengths(self):
        buf = ReplayBuffer(32, 1)
        push_episode(buf, 0, 6)
        rng = np.random.default_rng(0)
        for sub in buf.sample(200, seq_len=3, rng=rng):
            j = int(sub.transitions[-1].r)
            assert sub.burn_in_len == min(3, j)


class TestSampling:
    def test_deterministic_given_seed(self):
        buf = ReplayBuffer(32, 1)
        push_episode(buf, 0, 8)
        a = buf.sample(16, 4, np.random.default_rng(42))
        b = buf.sample(16, 4, np.random.default_rng(42))
        for x, y in zip(a, b):
            assert x.burn_in_len == y.burn_in_len
            assert [t.r for t in x.transitions] == [t.r for t in y.transitions]

    def test_uniform_over_valid_ends(self):
        # 5-transition episode with seq_len 1: all five ends valid
        buf = ReplayBuffer(16, 1)
        push_episode(buf, 0, 5)
        assert len(buf.valid_window_ends(1)) == 5
        rng = np.random.default_rng(7)
        counts = np.zeros(5)
        for _ in range(1000):
            sub = buf.sample(1, 1, rng)[0]
            counts[int(sub.transitions[-1].r)] += 1
        assert np.all(np.abs(counts - 200) <= 60)

    def test_batch_sample_matches_object_sample(self):
        buf = ReplayBuffer(64, 1)
        push_episode(buf, 0, 5)
        push_episode(buf, 10, 6)
        subs = buf.sample(32, 3, np.random.default_rng(9))
        batch = buf.sample_batch(32, 3, np.random.default_rng(9))
        for i, sub in enumerate(subs):
            last = sub.transitions[-1]
            assert batch.obs[i, 0] == last.s[0]
            assert batch.action[i] == last.a
            assert batch.reward[i] == last.r
            assert batch.next_obs[i, 0] == last.s_next[0]
            assert batch.terminal[i] == last.terminal
            assert batch.burn_len[i] == sub.burn_in_len
            # left-padded burn-in columns
            k = 3
            for col in range(k):
                if col < k - sub.burn_in_len:
                    assert batch.burn_obs[i, col, 0] == 0.0
                else:
                    t = sub.transitions[col - (k - sub.burn_in_len)]
                    assert batch.burn_obs[i, col, 0] == t.s[0]

    def test_empty_buffer_raises(self):
        buf = ReplayBuffer(8, 1)
        with pytest.raises(EmptyBufferError):
            buf.sample(1, 1, np.random.default_rng(0))

    def test_bad_seq_len(self):
        buf = ReplayBuffer(8, 1)
        buf.push(tr(0, terminal=True))
        with pytest.raises(ValueError):
            buf.sample(1, 0, np.random.default_rng(0))

    def test_uint8_storage_roundtrip(self):
        buf = ReplayBuffer(8, 3, obs_dtype=np.uint8)
        s = np.array([0, 1, 1], dtype=np.float32)
        buf.push(Transition(s=s, a=1, r=1.0, s_next=1 - s, terminal=True))
        batch = buf.sample_batch(4, 2, np.random.default_rng(0))
        assert batch.obs.dtype == np.float32
        assert np.array_equal(batch.obs[0], s)
        assert np.array_equal(batch.next_obs[0], 1 - s)

    def test_sample_transitions_uniform_and_complete(self):
        buf = ReplayBuffer(16, 1)
        push_episode(buf, 0, 4)
        batch = buf.sample_transitions(500, np.random.default_rng(3))
        seen = set(batch.reward.tolist())
        assert seen == {0.0, 1.0, 2.0, 3.0}
