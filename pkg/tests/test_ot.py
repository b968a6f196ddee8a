import itertools
import json
import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from trgl.data import gen_two_moons
from trgl.errors import ConfigError, DataError, FormatError, UnsupportedCaseError
from trgl.ot import (
    DiscreteDistribution,
    exact_w2,
    fit_linear,
    holder_probe,
    linear_assignment,
    load_cloud,
    mms_chain,
    mms_oracle,
    plan_cost,
    save_cloud,
    verify_prop1,
    w2,
)


def cloud(n, d=2, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    return DiscreteDistribution(rng.standard_normal((n, d)), rng.integers(0, 2, n) if labels else None)


def moons_cloud(n=64, seed=0):
    ds = gen_two_moons(n, 0.1, seed)
    return DiscreteDistribution(ds.X, ds.y)


def test_identical_clouds():
    a = cloud(9)
    cost, plan = exact_w2(a, a)
    assert cost == 0.0
    assert plan_cost(a.points, a.points, np.arange(9)) == 0.0


def test_single_pair():
    cost, plan = exact_w2(DiscreteDistribution([[0.0, 0.0]]), DiscreteDistribution([[3.0, 4.0]]))
    assert cost == 25.0 and plan.permutation.tolist() == [0]
    assert w2([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


def test_unequal_sizes_unsupported():
    with pytest.raises(UnsupportedCaseError):
        exact_w2(cloud(3), cloud(4))


def test_dimension_mismatch():
    with pytest.raises(DataError):
        exact_w2(cloud(3, 2), cloud(3, 3))


def test_distribution_validation():
    with pytest.raises(DataError):
        DiscreteDistribution(np.zeros((0, 2)))
    with pytest.raises(DataError):
        DiscreteDistribution([[np.nan, 0.0]])
    with pytest.raises(DataError):
        DiscreteDistribution(np.zeros((3, 2)), [0, 1])


@pytest.mark.parametrize("n", [5, 17, 40])
def test_assignment_matches_scipy(n):
    rng = np.random.default_rng(n)
    cost = rng.random((n, n))
    perm = linear_assignment(cost)
    rows, cols = linear_sum_assignment(cost)
    assert sorted(perm.tolist()) == list(range(n))
    assert cost[np.arange(n), perm].sum() == pytest.approx(cost[rows, cols].sum(), abs=1e-12)


def test_assignment_brute_force_small():
    rng = np.random.default_rng(3)
    for n in range(1, 6):
        cost = rng.random((n, n))
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert cost[np.arange(n), linear_assignment(cost)].sum() == pytest.approx(best, abs=1e-12)


def test_relabelling_invariance_up_to_60():
    for n in (10, 33, 60):
        a, b = cloud(n, seed=n), cloud(n, seed=n + 100)
        rng = np.random.default_rng(n)
        shuffled = DiscreteDistribution(b.points[rng.permutation(n)])
        assert exact_w2(a, b)[0] == pytest.approx(exact_w2(a, shuffled)[0], abs=1e-12)


def test_plan_cost_matches_reported_cost():
    a, b = cloud(25, seed=1), cloud(25, seed=2)
    cost, plan = exact_w2(a, b)
    assert abs(plan_cost(a.points, b.points, plan.permutation) - cost) <= 1e-12
    assert plan.cost == cost


def test_symmetry_is_exact():
    a, b = cloud(30, 3, seed=4), cloud(30, 3, seed=5)
    assert exact_w2(a, b)[0] == exact_w2(b, a)[0]


def test_tiny_tau_keeps_input():
    rho = moons_cloud()
    res = mms_oracle(rho, 1e-8, outer_iters=50)
    assert np.mean(np.linalg.norm(res.output.points - rho.points, axis=1)) < 1e-4


def test_separable_cloud_is_fixed_point():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-3, 0.3, (20, 2)), rng.normal(3, 0.3, (20, 2))])
    y = np.repeat([0, 1], 20)
    clf, _ = fit_linear(X, y, 2, 2000)
    res = mms_oracle(DiscreteDistribution(X, y), 0.5, classifier=clf, outer_iters=50)
    assert np.mean(np.sum((res.output.points - X) ** 2, axis=1)) < 1e-10


def test_oracle_objective_never_exceeds_start():
    rho = moons_cloud(48)
    res = mms_oracle(rho, 0.5, outer_iters=40, start_iters=500)
    assert res.objective <= res.start_separability + 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))


def test_chain_separability_decreases():
    steps = mms_chain(moons_cloud(48), 0.5, 3, outer_iters=30, start_iters=500)
    seps = [s.start_separability for s in steps] + [steps[-1].separability]
    assert all(b <= a + 1e-6 for a, b in zip(seps, seps[1:]))


@pytest.mark.parametrize("tau", [0.0, -1.0, math.inf])
def test_oracle_rejects_bad_tau(tau):
    with pytest.raises(ConfigError):
        mms_oracle(moons_cloud(), tau)


def test_oracle_needs_labels():
    with pytest.raises(DataError):
        mms_oracle(cloud(8), 0.5)


def test_prop1_rejects_infinite_tau():
    with pytest.raises(ConfigError):
        verify_prop1(moons_cloud(), math.inf)


def test_prop1_tiny_tau_is_degenerate():
    rho = moons_cloud()
    report = verify_prop1(rho, 1e-8, train_iters=1000, outer_iters=20)
    assert report.degenerate and report.ratio is None
    assert report.w2_input_to_oracle <= 1e-6 and report.w2_to_oracle < 1e-3
    data = json.loads(report.to_json())
    assert data["degenerate"] is True and data["n"] == 64


def test_holder_identity_and_scaling():
    pts = cloud(50, 3, seed=8)
    ident = holder_probe(lambda x: x, pts, pairs=100)
    double = holder_probe(lambda x: 2 * x, pts, pairs=100)
    assert ident.exponent == pytest.approx(1.0, abs=1e-6) and ident.constant == pytest.approx(1.0, abs=1e-6)
    assert double.exponent == pytest.approx(1.0, abs=1e-6) and double.constant == pytest.approx(2.0, abs=1e-6)


def test_holder_rejects_degenerate_support():
    with pytest.raises(DataError):
        holder_probe(lambda x: x, np.ones((5, 2)), pairs=20)
    with pytest.raises(ConfigError):
        holder_probe(lambda x: x, cloud(5), pairs=3)


def test_cloud_round_trip(tmp_path):
    for c in (cloud(12, 3, labels=True), cloud(4)):
        path = tmp_path / "c.csv"
        save_cloud(c, path)
        back = load_cloud(path)
        assert np.array_equal(back.points, c.points)
        assert (back.labels is None) == (c.labels is None)
        if c.labels is not None:
            assert np.array_equal(back.labels, c.labels)


def test_malformed_cloud(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x0,x1\n1.0,abc\n")
    with pytest.raises(FormatError):
        load_cloud(path)
