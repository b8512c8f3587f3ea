import numpy as np
import pytest

from congest.chain import (KernelFactory, ReducibleChainError, TransitionKernel, arrival_conditioned,
                           augmented_from_marginal, build_kernel, event_type_dist, stationary_closed_form,
                           stationary_solve)
from congest.systems import Event, Kind, SpecError, SystemSpec, mnm1_example, parallel_example
from conftest import mm1


def small_mnm1(lam, mu=1.0):
    return SystemSpec(kind=Kind.MNM1, arrival_rates=tuple(lam), service_rates=(mu,), capacities=(len(lam) - 1,))


def test_event_type_dist():
    assert event_type_dist(0, [0.7, 1.0, 1.0], 1.0, 2) == (1.0, 0.0)
    assert event_type_dist(2, [0.7, 1.0, 1.0], 1.0, 2) == (0.0, 1.0)
    assert event_type_dist(1, [1.0, 2.0, 0.0], 1.0, 2)[0] == pytest.approx(2 / 3)
    with pytest.raises(SpecError):
        event_type_dist(0, [0.0, 1.0], 1.0, 1)


def test_never_admit_kernel_returns_to_empty(mnm1):
    K = build_kernel(mnm1, np.zeros(21))
    i = K.states.index((Event.ARRIVAL, 0))
    assert K.matrix[i, i] == 1.0


def test_capacity_one_two_cycle():
    spec = mm1(capacity=1)
    K = build_kernel(spec, np.array([1.0, 0.0]))
    a, s = K.states.index((Event.ARRIVAL, 0)), K.states.index((Event.SERVICE_Q0, 1))
    assert K.matrix[a, s] == 1.0 and K.matrix[s, a] == 1.0
    d = stationary_solve(K)
    assert np.allclose(d.probs, 0.5)
    assert np.allclose(arrival_conditioned(d), [1.0, 0.0])


def test_random_rows_sum_to_one(rng):
    for _ in range(20):
        spec = small_mnm1(list(rng.uniform(0.1, 5, 6)), rng.uniform(0.1, 5))
        K = build_kernel(spec, rng.uniform(0, 1, 6))
        assert np.allclose(K.matrix.sum(axis=1), 1.0, atol=1e-12)
    K = build_kernel(parallel_example(), rng.uniform(0, 1, 44))
    assert np.allclose(K.matrix.sum(axis=1), 1.0, atol=1e-12)


def test_closed_form_edge_cases():
    spec = small_mnm1([1.5, 1.2, 1.0, 0.8, 0.0])
    d = stationary_closed_form(spec, [0.0, 0.5, 0.5, 0.5, 0.5])
    assert d[0] == 1.0 and np.all(d[1:] == 0)
    d = stationary_closed_form(mm1(capacity=1), [1.0, 0.0])
    assert np.allclose(d, [0.5, 0.5])


def test_closed_form_matches_solve():
    spec = small_mnm1([1.5, 1.2, 1.0, 0.8, 0.0])
    pbar = np.array([0.9, 0.7, 0.5, 0.3, 0.0])
    closed = stationary_closed_form(spec, pbar)
    solved = stationary_solve(build_kernel(spec, pbar)).queue_marginal()
    assert np.max(np.abs(closed - solved)) <= 1e-10


def test_identity_cycle():
    space = mm1(capacity=1).state_space()
    K = TransitionKernel([(0, 0), (1, 1)], np.array([[0.0, 1.0], [1.0, 0.0]]), space)
    assert np.allclose(stationary_solve(K).probs, 0.5)


def test_reducible_kernel_rejected():
    space = mm1(capacity=1).state_space()
    K = TransitionKernel([(0, 0), (1, 1)], np.eye(2), space)
    with pytest.raises(ReducibleChainError, match="recurrent classes"):
        stationary_solve(K)


def test_parallel_invariance_residual(parallel):
    K = build_kernel(parallel, np.full(44, 0.5))
    d = stationary_solve(K)
    assert np.max(np.abs(d.probs @ K.matrix - d.probs)) <= 1e-10
    assert d.probs.min() >= 0 and d.probs.sum() == pytest.approx(1.0)


def test_arrival_conditioning_normalizes():
    space = mm1(capacity=1).state_space()
    from congest.chain import StationaryDist

    d = StationaryDist([(0, 0), (0, 1), (1, 1)], np.full(3, 1 / 3), space)
    assert np.allclose(arrival_conditioned(d), [0.5, 0.5])


def test_factory_is_affine(mnm1, rng):
    f = KernelFactory(mnm1)
    p, q = rng.uniform(0, 1, 21), rng.uniform(0, 1, 21)
    mid = f.kernel(0.5 * (p + q)).matrix
    assert np.allclose(mid, 0.5 * (f.kernel(p).matrix + f.kernel(q).matrix))


def test_fixed_admission_ignores_profile():
    spec = mnm1_example(capacity=5, fixed_admission=0.4)
    f = KernelFactory(spec)
    assert np.allclose(f.kernel(np.zeros(6)).matrix, f.kernel(np.ones(6)).matrix)


def test_profile_validation(mnm1):
    with pytest.raises(SpecError):
        build_kernel(mnm1, np.full(3, 0.5))
    with pytest.raises(SpecError):
        build_kernel(mnm1, np.full(21, 1.5))


def test_augmented_from_marginal(mnm1):
    space = mnm1.state_space()
    d = augmented_from_marginal(space, stationary_closed_form(mnm1, np.full(21, 0.6)))
    assert d.probs.sum() == pytest.approx(1.0)
    assert np.allclose(d.queue_marginal(), stationary_closed_form(mnm1, np.full(21, 0.6)))
