import numpy as np
import pytest
from hypothesis import given, strategies as st

from evalora.linalg import principal_angles, svd_truncated
from evalora.net import Batch, Dense, LinearLayer, ToyNetwork, make_teacher_student
from evalora.svdstream import (StreamConfig, SvdState, check_convergence, matrix_batches,
                               run_initialization_pass, stream_pass, svd_update, tracked_components)


def fresh(d, m, name="L"):
    return SvdState.empty(name, d, m)


def one_layer(d=6, k=3):
    return ToyNetwork([Dense(LinearLayer("fc", np.zeros((k, d))), "none")])


def batches_of(rows_list, k=3):
    for x in rows_list:
        yield Batch(x, np.zeros((x.shape[0], k)))


@pytest.mark.parametrize("r,rho,d,m", [(16, 1, None, 16), (4, 2.5, None, 10), (4, 1.5, None, 6),
                                      (16, 3, 32, 32), (3, 1.1, None, 4)])
def test_tracked_components(r, rho, d, m):
    assert tracked_components(r, rho, d) == m


def test_first_update_is_plain_svd(rng):
    x = rng.standard_normal((7, 5))
    s = svd_update(fresh(5, 3), x)
    ref = svd_truncated(x, 3)
    assert np.array_equal(s.sigma, ref.sigma) and np.array_equal(s.v, ref.vt)
    assert s.samples_seen == 7 and s.updates == 1


def test_zero_batch_changes_nothing(rng):
    s = svd_update(fresh(5, 3), rng.standard_normal((8, 5)))
    s2 = svd_update(s, np.zeros((4, 5)))
    assert np.allclose(s2.sigma, s.sigma, atol=1e-10)
    assert np.allclose(s2.last_similarity, 1.0)
    assert s2.samples_seen == 12


def test_two_updates_match_concatenation(rng):
    x1 = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 6))
    x2 = rng.standard_normal((3, 2)) @ rng.standard_normal((2, 6))
    s = svd_update(svd_update(fresh(6, 4), x1), x2)
    ref = svd_truncated(np.vstack([x1, x2]), 4)
    assert np.allclose(s.sigma, ref.sigma, atol=1e-8 * ref.sigma[0])
    assert principal_angles(s.v[:2], ref.vt[:2]).max() < 1e-6


def test_update_errors(rng):
    s = fresh(4, 2)
    with pytest.raises(ValueError):
        svd_update(s, np.ones((3, 5)))
    with pytest.raises(ValueError):
        svd_update(s, np.ones((0, 4)))
    with pytest.raises(ValueError):
        svd_update(s, np.full((2, 4), np.inf))
    done = svd_update(s, rng.standard_normal((3, 4)))
    from dataclasses import replace
    with pytest.raises(ValueError):
        svd_update(replace(done, converged=True), rng.standard_normal((3, 4)))


def with_similarity(sim):
    sim = np.asarray(sim, dtype=float)
    d = sim.size
    return SvdState("L", d, d, np.eye(d), np.ones(d), samples_seen=10, updates=2, last_similarity=sim)


def test_convergence_examples():
    assert check_convergence(with_similarity([1, 1, 1]), 0.99)
    assert not check_convergence(with_similarity([1.0, 0.98]), 0.99)
    assert check_convergence(with_similarity([1.0, 0.98]), 0.99, first=1)
    with pytest.raises(ValueError):
        check_convergence(fresh(3, 2), 0.99)


def test_stationary_rank1_converges_after_two(rng):
    u = rng.standard_normal((8, 1))
    v = rng.standard_normal((1, 6))
    x = u @ v
    s = svd_update(fresh(6, 1), x)
    s = svd_update(s, x)
    assert check_convergence(s, 0.99)

    res = run_initialization_pass(one_layer(), batches_of([x] * 10), StreamConfig(r=1, tau=0.99))
    assert res.batches == 2 and res.all_converged


def test_delta_half_stops_early():
    # four layers fed directly; two receive a stationary rank-1 stream, two receive fresh noise
    rng = np.random.default_rng(0)
    fixed = rng.standard_normal((6, 1)) @ rng.standard_normal((1, 5))
    acts = {"a": np.vstack([fixed] * 20), "b": np.vstack([fixed] * 20),
            "c": rng.standard_normal((120, 5)), "d": rng.standard_normal((120, 5))}
    starts, tap = matrix_batches(acts, 6)
    res = stream_pass(starts, tap, {n: 5 for n in acts}, StreamConfig(r=1, delta=0.5))
    assert res.batches == 2
    assert {n for n, s in res.states.items() if s.converged} == {"a", "b"}
    assert res.unconverged == ["c", "d"]


def test_max_batches_one(rng):
    xs = [rng.standard_normal((8, 6)) for _ in range(5)]
    res = run_initialization_pass(one_layer(), batches_of(xs), StreamConfig(r=2, max_batches=1))
    assert res.batches == 1 and res.unconverged == ["fc"]
    assert np.array_equal(res.states["fc"].v, svd_truncated(xs[0], 2).vt)


def test_masked_batches_skipped(rng):
    x = rng.standard_normal((8, 1)) @ rng.standard_normal((1, 6))
    empty = Batch(x, np.zeros((8, 3)), np.zeros(8, dtype=bool))
    stream = [empty, Batch(x, np.zeros((8, 3))), empty, Batch(x, np.zeros((8, 3)))]
    res = run_initialization_pass(one_layer(), stream, StreamConfig(r=1))
    assert res.batches == 2 and res.all_converged
    assert res.states["fc"].samples_seen == 16


def test_exhausted_stream():
    with pytest.raises(ValueError):
        run_initialization_pass(one_layer(), [], StreamConfig(r=1))


def test_converged_state_frozen():
    _, student, data = make_teacher_student(None, 0)
    res = run_initialization_pass(student, data.stream(16, 1), StreamConfig(r=2, delta=1.0))
    first = min(res.converged_at, key=res.converged_at.get)
    # a converged layer keeps the state it had at its convergence batch
    st = res.states[first]
    assert st.converged and st.updates == res.converged_at[first]


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_incremental_equals_batch(seed, n_batches):
    rng = np.random.default_rng(seed)
    d, rank = 7, 3
    basis = rng.standard_normal((rank, d))
    xs = [rng.standard_normal((int(rng.integers(1, 5)), rank)) @ basis for _ in range(n_batches)]
    s = fresh(d, 4)
    total = 0.0
    for x in xs:
        s = svd_update(s, x)
        mass = float(np.sum(s.sigma ** 2))
        assert mass >= total - 1e-9 * max(mass, 1.0)
        total = mass
        assert np.allclose(s.v @ s.v.T, np.eye(s.n_components), atol=1e-6)
    cat = np.vstack(xs)
    k = min(4, *cat.shape)
    ref = svd_truncated(cat, k)
    assert np.allclose(s.sigma, ref.sigma, rtol=0, atol=1e-8 * ref.sigma[0])
    r_eff = int(np.sum(ref.sigma > 1e-9 * ref.sigma[0]))
    assert principal_angles(s.v[:r_eff], ref.vt[:r_eff]).max() < 1e-6


def test_randomized_stream_matches_exact(rng):
    basis = rng.standard_normal((3, 12))
    xs = [rng.standard_normal((10, 3)) @ basis for _ in range(4)]
    a = b = None
    a, b = fresh(12, 3), fresh(12, 3)
    for x in xs:
        a = svd_update(a, x)
        b = svd_update(b, x, randomized=True, oversample=5, seed=1)
    assert np.allclose(a.sigma, b.sigma, rtol=1e-6)


def test_centering_matches_centred_svd(rng):
    xs = [rng.standard_normal((6, 4)) + 3.0 for _ in range(3)]
    s = SvdState.empty("L", 4, 4, center=True)
    for x in xs:
        s = svd_update(s, x)
    cat = np.vstack(xs)
    ref = svd_truncated(cat - cat.mean(axis=0), 4)
    assert np.allclose(s.sigma, ref.sigma, atol=1e-10)
    assert np.allclose(s.mean, cat.mean(axis=0))
