import numpy as np

from duoformer.rng import Rng, stable_hash


def test_same_seed_same_stream():
    a = Rng(1234).next_u64(100)
    b = Rng(1234).next_u64(100)
    assert np.array_equal(a, b)


def test_streams_are_counter_based():
    r = Rng(99)
    first = r.next_u64(10)
    rest = r.next_u64(10)
    whole = Rng(99).next_u64(20)
    assert np.array_equal(np.concatenate([first, rest]), whole)


def test_known_splitmix_values():
    # reference values computed from the documented mixer with python ints
    def ref(seed, k):
        state = (seed + (k + 1) * 0x9E3779B97F4A7C15) & (1 << 64) - 1
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & (1 << 64) - 1
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & (1 << 64) - 1
        return z ^ (z >> 31)

    out = Rng(42).next_u64(5)
    assert [int(v) for v in out] == [ref(42, k) for k in range(5)]


def test_uniform_range_and_determinism():
    u = Rng(7).uniform((1000,), -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
    assert np.array_equal(u, Rng(7).uniform((1000,), -2.0, 3.0))


def test_normal_moments():
    z = Rng(11).normal((200_000,))
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_truncated_normal_bound():
    z = Rng(3).truncated_normal((50_000,), std=0.02)
    assert np.abs(z).max() <= 0.04
    assert abs(z.mean()) < 1e-3


def test_permutation_is_a_permutation():
    p = Rng(5).permutation(257)
    assert sorted(p.tolist()) == list(range(257))


def test_integers_in_range():
    v = Rng(8).integers(3, 9, (1000,))
    assert v.min() >= 3 and v.max() < 9
    assert set(np.unique(v)) == set(range(3, 9))


def test_derive_is_independent_of_consumption():
    r = Rng(21)
    child_before = r.derive("x").next_u64(4)
    r.next_u64(100)
    child_after = r.derive("x").next_u64(4)
    assert np.array_equal(child_before, child_after)
    assert not np.array_equal(child_before, r.derive("y").next_u64(4))


def test_stable_hash_is_stable():
    # frozen value: guards against accidental changes to the seeding scheme
    assert stable_hash("base", 1, "k") == stable_hash("base", 1, "k")
    assert stable_hash(0) == 4066689987807800415
    assert stable_hash(0, "a") != stable_hash(0, "b")
