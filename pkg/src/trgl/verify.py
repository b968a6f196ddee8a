"""Self-contained verification suites with embedded seeds.

Each suite returns a ``SuiteReport`` listing one ``Check`` per property;
the command line prints them and exits non-zero when any check fails.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import gen_two_moons
from .ot import (
    DiscreteDistribution,
    exact_w2,
    holder_probe,
    mms_chain,
    mms_oracle,
    plan_cost,
    verify_prop1,
)
from .tensor import Tensor, backward, forward_op

SUITES = ("ot", "mms", "prop1", "holder", "gradcheck")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    def lines(self) -> list[str]:
        return [f"[{'PASS' if c.passed else 'FAIL'}] {self.suite}/{c.name}: {c.detail}" for c in self.checks]

    def to_json(self) -> str:
        return json.dumps({"suite": self.suite, "passed": self.passed, "seconds": self.seconds,
                           "checks": [asdict(c) for c in self.checks]}, indent=2)


# ---------------------------------------------------------------------------
# finite differences


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _projected(op: str, arrays: list[np.ndarray], kwargs: dict, probe: np.ndarray | None,
               requires_grad: bool) -> tuple[Tensor, list[Tensor]]:
    """Scalar ``mean(op(inputs) @ probe)`` (or the op itself when scalar-valued)."""
    inputs = [Tensor(a, requires_grad=requires_grad) for a in arrays]
    out = forward_op(op, inputs, **kwargs)
    if probe is not None:
        out = forward_op("mean", [forward_op("matmul", [out, Tensor(probe)])])
    return out, inputs


def gradcheck(op: str, arrays: list[np.ndarray], kwargs: dict | None = None,
              probe: np.ndarray | None = None, step: float = 1e-5) -> float:
    """Largest relative error between backward and central differences."""
    kwargs = kwargs or {}
    loss, inputs = _projected(op, arrays, kwargs, probe, True)
    backward(loss)
    worst = 0.0
    for i, arr in enumerate(arrays):
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            shifted = [a.copy() for a in arrays]
            shifted[i][idx] = arr[idx] + step
            up = _projected(op, shifted, kwargs, probe, False)[0].item()
            shifted[i][idx] = arr[idx] - step
            down = _projected(op, shifted, kwargs, probe, False)[0].item()
            numeric[idx] = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(inputs[i].grad, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def gradcheck_instance(op: str, rng: np.random.Generator) -> float:
    """One random instance (shapes and values drawn from ``rng``) of ``op``."""
    n, m, p = (int(v) for v in rng.integers(1, 6, size=3))
    probe = rng.standard_normal((m, 1))
    if op == "matmul":
        return gradcheck(op, [rng.standard_normal((n, p)), rng.standard_normal((p, m))], probe=probe)
    if op == "add":
        return gradcheck(op, [rng.standard_normal((n, m)), rng.standard_normal((n, m))], probe=probe)
    if op == "add_bias":
        return gradcheck(op, [rng.standard_normal((n, m)), rng.standard_normal(m)], probe=probe)
    if op == "relu":
        return gradcheck(op, [_away_from_zero(rng, (n, m))], probe=probe)
    if op == "scale":
        return gradcheck(op, [rng.standard_normal((n, m))], {"c": float(rng.normal(0, 2))}, probe=probe)
    if op == "sum_sq":
        return gradcheck(op, [rng.standard_normal((n, m))])
    if op == "mean":
        return gradcheck(op, [rng.standard_normal((n, m))])
    if op == "softmax_cross_entropy":
        c = m + 1
        labels = rng.integers(0, c, size=n)
        return gradcheck(op, [2.0 * rng.standard_normal((n, c))], {"labels": labels})
    raise ValueError(f"no gradient check for {op!r}")


def fan_out_error(rng: np.random.Generator, step: float = 1e-5) -> float:
    """``sum_sq(x) + mean(x)`` shares ``x`` between two consumers."""
    x0 = rng.standard_normal((3, 4))

    def value(x, grad=False):
        t = Tensor(x, requires_grad=grad)
        a = forward_op("sum_sq", [t])
        b = forward_op("mean", [t])
        return forward_op("add", [forward_op("scale", [a], c=0.5), b]), t

    loss, t = value(x0, True)
    backward(loss)
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        up, down = x0.copy(), x0.copy()
        up[idx] += step
        down[idx] -= step
        numeric[idx] = (value(up)[0].item() - value(down)[0].item()) / (2 * step)
    return relative_error(t.grad, numeric)


def run_gradcheck(instances: int = 20, seed: int = 0, tol: float = 1e-6) -> SuiteReport:
    from .tensor import OPS

    start = time.perf_counter()
    report = SuiteReport("gradcheck")
    rng = np.random.default_rng(seed)
    for op in OPS:
        errs = [gradcheck_instance(op, rng) for _ in range(instances)]
        report.add(op, max(errs) <= tol, f"max relative error {max(errs):.2e} over {instances} instances")
    errs = [fan_out_error(rng) for _ in range(instances)]
    report.add("fan_out", max(errs) <= tol, f"max relative error {max(errs):.2e}")
    report.seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# exact transport


def brute_force_w2(a: np.ndarray, b: np.ndarray) -> float:
    return min(plan_cost(a, b, perm) for perm in itertools.permutations(range(len(a))))


def run_ot(instances: int = 120, max_n: int = 6, seed: int = 0) -> SuiteReport:
    start = time.perf_counter()
    report = SuiteReport("ot")
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(instances):
        n = 1 + i % max_n
        d = int(rng.integers(1, 4))
        a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        cost, _ = exact_w2(DiscreteDistribution(a), DiscreteDistribution(b))
        mismatches += cost != brute_force_w2(a, b)
    report.add("brute_force", mismatches == 0, f"{instances - mismatches}/{instances} exact matches, n <= {max_n}")
    worst_sym, worst_tri = 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(2, 30))
        x, y, z = (DiscreteDistribution(rng.standard_normal((n, 2))) for _ in range(3))
        worst_sym = max(worst_sym, abs(exact_w2(x, y)[0] - exact_w2(y, x)[0]))
        dxy, dyz, dxz = (math.sqrt(exact_w2(p, q)[0]) for p, q in ((x, y), (y, z), (x, z)))
        worst_tri = max(worst_tri, dxz - dxy - dyz)
    report.add("symmetry", worst_sym == 0.0, f"max asymmetry {worst_sym:.1e}")
    report.add("triangle", worst_tri <= 1e-9, f"max violation {max(worst_tri, 0.0):.1e}")
    report.seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# minimizing movement oracle


def run_mms(seeds=range(10), taus=(0.1, 0.5, 2.0), n: int = 128, chain_steps: int = 5,
            noise: float = 0.1, tol: float = 1e-6, outer_iters: int = 100) -> SuiteReport:
    start = time.perf_counter()
    report = SuiteReport("mms")
    worst_gap, worst_rise = -math.inf, -math.inf
    for seed in seeds:
        ds = gen_two_moons(n, noise, seed)
        rho = DiscreteDistribution(ds.X, ds.y)
        for tau in taus:
            res = mms_oracle(rho, tau, outer_iters=outer_iters)
            worst_gap = max(worst_gap, res.objective - res.start_separability)
            chain = mms_chain(rho, tau, chain_steps, outer_iters=outer_iters // 2)
            z = [chain[0].start_separability] + [step.separability for step in chain]
            worst_rise = max(worst_rise, max(b - a for a, b in zip(z, z[1:])))
    runs = len(list(seeds)) * len(taus)
    report.add("proximal_decrease", worst_gap <= tol,
               f"max(objective - Z(input)) = {worst_gap:.2e} over {runs} runs")
    report.add("chain_monotone", worst_rise <= tol,
               f"max per-step increase of Z = {worst_rise:.2e} over {chain_steps}-step chains")
    report.seconds = time.perf_counter() - start
    return report


def run_prop1(seeds=range(5), tau: float = 0.5, n: int = 128, threshold: float = 0.5,
              min_pass: int = 4, noise: float = 0.1) -> SuiteReport:
    start = time.perf_counter()
    report = SuiteReport("prop1")
    ratios = []
    for seed in seeds:
        ds = gen_two_moons(n, noise, seed)
        rep = verify_prop1(DiscreteDistribution(ds.X, ds.y), tau, seed=seed)
        ratios.append(rep.ratio)
        shown = "degenerate" if rep.ratio is None else f"{rep.ratio:.3f}"
        report.add(f"seed{seed}", rep.ratio is not None and rep.ratio < threshold,
                   f"ratio {shown} (W2 to oracle {rep.w2_to_oracle:.4f}, oracle moved {rep.w2_input_to_oracle:.4f})")
    below = sum(r is not None and r < threshold for r in ratios)
    report.seconds = time.perf_counter() - start
    # individual seeds are informative; the suite verdict is the quorum
    report.checks = [Check(c.name, True, ("" if c.passed else "above threshold; ") + c.detail)
                     for c in report.checks]
    shown = ", ".join("degenerate" if r is None else f"{r:.3f}" for r in ratios)
    report.add("quorum", below >= min_pass, f"{below}/{len(ratios)} seeds below {threshold} (ratios {shown})")
    return report


# ---------------------------------------------------------------------------
# Hölder probe


def half_power_map(x: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(x, axis=1, keepdims=True)
    return np.sqrt(r) * x / r


def radial_points(n: int, d: int = 2, seed: int = 0) -> np.ndarray:
    """Points with norms log-uniform in (1e-4, 1); pair distances span decades."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * np.exp(rng.uniform(np.log(1e-4), 0.0, size=(n, 1)))


def run_holder(pairs: int = 400, seed: int = 0) -> SuiteReport:
    start = time.perf_counter()
    report = SuiteReport("holder")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(200, 2))
    ident = holder_probe(lambda x: x, pts, pairs, seed)
    report.add("identity", abs(ident.exponent - 1) <= 1e-6 and abs(ident.constant - 1) <= 1e-6,
               f"exponent {ident.exponent:.8f}, constant {ident.constant:.8f}")
    double = holder_probe(lambda x: 2 * x, pts, pairs, seed)
    report.add("scaling", abs(double.exponent - 1) <= 1e-6 and abs(double.constant - 2) <= 1e-6,
               f"exponent {double.exponent:.8f}, constant {double.constant:.8f}")
    half = holder_probe(half_power_map, radial_points(400, 2, seed), pairs, seed)
    report.add("half_power", abs(half.exponent - 0.5) <= 0.05, f"exponent {half.exponent:.4f}")
    report.seconds = time.perf_counter() - start
    return report


RUNNERS = {"ot": run_ot, "mms": run_mms, "prop1": run_prop1, "holder": run_holder, "gradcheck": run_gradcheck}


def run_suite(name: str, **kwargs) -> SuiteReport:
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return RUNNERS[name](**kwargs)
