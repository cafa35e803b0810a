import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_case
from gridstate.bp import (
    BPConfig,
    BPMessages,
    FactorGraph,
    GaussianBP,
    bp_half_iterations,
    bp_solve,
    bp_solve_multiarea,
    build_factor_graph,
    iterations_to,
    wrap_angle,
)
from gridstate.estimation import gauss_newton_solve, rmse
from gridstate.measurement import (
    Kind,
    MeasurementModel,
    StateVector,
    build_plan_with_pmus,
    generate_measurements,
    legacy_template,
    pmu_full_plan,
)

EXACT = BPConfig(max_iterations=400, damping=0.0, tolerance=1e-14)


def posterior_mean(A, z, sigma, prior_mean, prior_var=1e10):
    W = np.diag(1 / np.asarray(sigma) ** 2)
    P = A.T @ W @ A + np.eye(A.shape[1]) / prior_var
    return np.linalg.solve(P, A.T @ W @ z + prior_mean / prior_var), np.diag(np.linalg.inv(P))


def random_tree_system(seed, n):
    """Unary factor on every variable plus one pairwise factor per tree edge."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        r = np.zeros(n)
        r[i] = rng.uniform(0.5, 2.0) * rng.choice([-1, 1])
        rows.append(r)
    for k in range(1, n):
        r = np.zeros(n)
        r[k] = rng.uniform(0.2, 2.0)
        r[rng.integers(0, k)] = rng.uniform(-2.0, 2.0)
        rows.append(r)
    A = np.array(rows)
    z = rng.normal(0, 1, len(A))
    sigma = rng.uniform(0.1, 1.0, len(A))
    return A, z, sigma


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 8))
def test_tree_graphs_give_exact_marginals(seed, half):
    n = 2 * half
    A, z, sigma = random_tree_system(seed, n)
    g = FactorGraph.from_linear(A, z, sigma)
    assert not g.has_cycle()
    res = bp_solve(g, EXACT)
    engine = GaussianBP(g, EXACT)
    for _ in range(res.iterations):
        engine.step()
    mean, var = posterior_mean(A, z, sigma, np.zeros(n))
    np.testing.assert_allclose(engine.msg.marg_mean, mean, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(engine.msg.marg_var, var, rtol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_pmu_only_networks_match_gauss_newton(seed):
    n = 4 + seed % 7
    case = random_case(seed, n, extra_edges=seed % 3)
    plan = pmu_full_plan(case)
    meas = generate_measurements(case, case.truth(), plan, seed)
    g = build_factor_graph(case, meas)
    assert not g.has_cycle()
    res = bp_solve(g, BPConfig(tolerance=1e-14))
    gn = gauss_newton_solve(case, meas).estimate
    assert res.converged
    # the soft pin leaves the slack angle within ~1e-9 of zero; compare the reduced state
    np.testing.assert_allclose(res.estimate.stacked(), gn.stacked(), atol=1e-10)
    z_slack = meas.z[2 * case.slack_index + 1]
    assert abs(res.estimate.theta[case.slack_index]) <= 1e-12 / 1e-8 * abs(z_slack) * 1.01 + 1e-14


def test_loopy_linear_fixed_point_is_least_squares():
    # a ring of pairwise factors with strong unary factors: converges, and
    # Gaussian BP means are exact at any fixed point
    rng = np.random.default_rng(1)
    n = 12
    rows = [np.eye(n)[i] * 2.0 for i in range(n)]
    for i in range(n):
        r = np.zeros(n)
        r[i], r[(i + 1) % n] = 1.0, -0.7
        rows.append(r)
    A = np.array(rows)
    z = rng.normal(0, 1, len(A))
    sigma = np.full(len(A), 0.5)
    g = FactorGraph.from_linear(A, z, sigma)
    assert g.has_cycle()
    res = bp_solve(g, BPConfig(max_iterations=5000, damping=0.5, tolerance=1e-13))
    assert res.converged
    mean, _ = posterior_mean(A, z, sigma, np.zeros(n))
    np.testing.assert_allclose(res.estimate.v, mean[: n // 2], atol=1e-9)
    np.testing.assert_allclose(res.estimate.theta, wrap_angle(mean[n // 2:]), atol=1e-9)


def test_degree_one_factor_message():
    g = FactorGraph.from_linear(np.array([[4.0]]), np.array([2.0]), np.array([0.5]))
    msg = bp_half_iterations(g, BPMessages(g), EXACT)
    m = msg.factor_to_variable(0)
    assert m.mean == pytest.approx(0.5)
    assert m.variance == pytest.approx(0.25 / 16)
    # the variable's outgoing message excludes the factor itself: the prior
    out = msg.variable_to_factor(0)
    assert out.variance == pytest.approx(1e10)


def test_damping_endpoints():
    A, z, sigma = random_tree_system(3, 6)
    g = FactorGraph.from_linear(A, z, sigma)
    first = bp_half_iterations(g, BPMessages(g), BPConfig(damping=0.0))
    undamped = bp_half_iterations(g, first, BPConfig(damping=0.0))
    finite = np.isfinite(first.f2v_var)
    assert finite.all()
    for alpha in (0.5, 0.999):
        damped = bp_half_iterations(g, first, BPConfig(damping=alpha))
        np.testing.assert_allclose(
            damped.f2v_mean, alpha * first.f2v_mean + (1 - alpha) * undamped.f2v_mean, rtol=1e-12
        )
        np.testing.assert_allclose(
            damped.f2v_var, alpha * first.f2v_var + (1 - alpha) * undamped.f2v_var, rtol=1e-12
        )
    # damping 1 would freeze every message forever
    for bad in (1.0, -0.1):
        with pytest.raises(ValueError):
            BPConfig(damping=bad)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_variable_relabelling_does_not_change_estimate(seed, half):
    n = 2 * half
    A, z, sigma = random_tree_system(seed, n)
    perm = np.random.default_rng(seed).permutation(n)
    a = bp_solve(FactorGraph.from_linear(A, z, sigma), EXACT)
    b = bp_solve(FactorGraph.from_linear(A[:, perm], z, sigma), EXACT)
    x_a = np.concatenate([a.estimate.v, a.estimate.theta])
    x_b = np.concatenate([b.estimate.v, b.estimate.theta])
    # estimate.theta is wrapped; compare on the unit circle where needed
    diff = x_a[perm] - x_b
    diff = np.where(np.abs(diff) > 1, wrap_angle(diff), diff)
    assert np.abs(diff).max() < 1e-10


def test_graph_structure(ieee30):
    plan = legacy_template(ieee30)
    meas = generate_measurements(ieee30, ieee30.truth(), plan, 0)
    g = build_factor_graph(ieee30, meas)
    deg = g.factor_degree()
    for m, e in enumerate(plan):
        if e.kind in (Kind.P_FLOW, Kind.Q_FLOW):
            assert deg[m] == 4
        elif e.kind in (Kind.P_INJ, Kind.Q_INJ):
            assert deg[m] == 2 * (1 + len(ieee30.neighbors()[e.loc1]))
        else:
            assert deg[m] == 1
    assert deg[-1] == 1 and g.edge_var[-1] == 30 + ieee30.slack_index
    assert g.has_cycle()
    assert g.dump().startswith("# factor variable\n")


def test_two_pmu_scenario_reaches_centralized_accuracy(ieee30, ieee30_part):
    plan = build_plan_with_pmus(ieee30, ieee30_part, 2)
    model = MeasurementModel(ieee30, plan)
    truth = ieee30.truth()
    meas = generate_measurements(ieee30, truth, plan, 21, model)
    base = rmse(gauss_newton_solve(ieee30, meas, model=model).estimate, truth)
    res = bp_solve(build_factor_graph(ieee30, meas, model=model), BPConfig(max_iterations=2025),
                   truth=truth, baseline_rmse=base)
    assert res.normalized_trace[-1] <= 1.02
    assert iterations_to(res.normalized_trace, 1.05) is not None


def test_multiarea_period_one_is_plain_bp(ieee30, ieee30_part):
    plan = build_plan_with_pmus(ieee30, ieee30_part, 1)
    meas = generate_measurements(ieee30, ieee30.truth(), plan, 4)
    g = build_factor_graph(ieee30, meas, ieee30_part)
    cfg = BPConfig(max_iterations=60)
    a = bp_solve(g, cfg, truth=ieee30.truth())
    b = bp_solve_multiarea(g, ieee30_part, 1, cfg, truth=ieee30.truth())
    np.testing.assert_array_equal(a.rmse_trace, b.rmse_trace)


def test_multiarea_slower_exchange_same_answer():
    case = random_case(5, 9, 3)
    from gridstate.grid import AreaPartition

    part = AreaPartition({b: 1 if b <= 4 else 2 for b in case.bus_ids})
    plan = pmu_full_plan(case) + legacy_template(case)
    meas = generate_measurements(case, case.truth(), plan, 2)
    g = build_factor_graph(case, meas, part)
    cfg = BPConfig(max_iterations=4000, tolerance=1e-12)
    fast = bp_solve_multiarea(g, part, 1, cfg)
    slow = bp_solve_multiarea(g, part, 5, cfg)
    assert fast.converged and slow.converged
    assert slow.iterations > fast.iterations
    np.testing.assert_allclose(slow.estimate.v, fast.estimate.v, atol=1e-6)
    np.testing.assert_allclose(slow.estimate.theta, fast.estimate.theta, atol=1e-6)
    with pytest.raises(ValueError):
        bp_solve_multiarea(g, part, 0)


def test_iterations_to():
    assert iterations_to([3.0, 1.0, 2.0, 1.0, 1.0], 1.5) == 4
    assert iterations_to([1.0, 1.0], 1.5) == 1
    assert iterations_to([1.0, 2.0], 1.5) is None
    assert iterations_to([], 1.0) is None


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle([0.1, 2 * np.pi + 0.1, -np.pi - 0.1]), [0.1, 0.1, np.pi - 0.1])


def test_messages_state_vector_shape(ieee30):
    g = build_factor_graph(ieee30, generate_measurements(ieee30, ieee30.truth(), pmu_full_plan(ieee30), 1))
    res = bp_solve(g, BPConfig(max_iterations=5), keep_estimates=True)
    assert len(res.estimates) == res.iterations
    assert isinstance(res.estimate, StateVector) and res.estimate.n_bus == 30
