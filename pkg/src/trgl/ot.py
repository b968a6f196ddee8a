"""Exact discrete optimal transport and a particle minimizing-movement oracle.

W2 between two uniform clouds of equal size reduces to a linear assignment
problem, solved here by shortest augmenting paths (O(n^3)). The oracle
computes one proximal step ``argmin_nu Z(nu) + W2^2(nu, rho) / (2 tau)``
where ``Z`` is the best mean cross-entropy reachable by a linear classifier.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, UnsupportedCaseError


@dataclass
class DiscreteDistribution:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if len(self.points) < 1:
            raise DataError("a distribution needs at least one support point")
        if not np.all(np.isfinite(self.points)):
            raise DataError("support points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise DataError(f"{len(self.labels)} labels for {len(self.points)} points")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class TransportPlan:
    permutation: np.ndarray
    cost: float


def plan_cost(a: np.ndarray, b: np.ndarray, perm) -> float:
    """Mean squared displacement of a coupling, summed with ``math.fsum``.

    fsum is correctly rounded, hence independent of summation order: the
    cost of a coupling and of its inverse agree to the last bit.
    """
    diff = a - b[np.asarray(perm)]
    return math.fsum((diff * diff).ravel()) / len(a)


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Row-to-column assignment of minimum total cost for a square matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise UnsupportedCaseError(f"assignment needs a square matrix, got {cost.shape}")
    # potentials u (rows), v (columns); column 0 is a virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[match[1:] - 1] = np.arange(n)
    return perm


def exact_w2(a: DiscreteDistribution, b: DiscreteDistribution) -> tuple[float, TransportPlan]:
    """Squared W2 between uniform clouds of equal size and an optimal coupling."""
    if a.n != b.n:
        raise UnsupportedCaseError(f"only equal-cardinality clouds are supported ({a.n} vs {b.n})")
    if a.d != b.d:
        raise DataError(f"dimension mismatch {a.d} vs {b.d}")
    sq = np.sum((a.points[:, None, :] - b.points[None, :, :]) ** 2, axis=2)
    perm = linear_assignment(sq)
    cost = plan_cost(a.points, b.points, perm)
    return cost, TransportPlan(perm, cost)


def w2(a, b) -> float:
    """W2 (not squared) between two equal-size point arrays or distributions."""
    a = a if isinstance(a, DiscreteDistribution) else DiscreteDistribution(a)
    b = b if isinstance(b, DiscreteDistribution) else DiscreteDistribution(b)
    return math.sqrt(exact_w2(a, b)[0])


# ---------------------------------------------------------------------------
# linear classifier used to evaluate Z, with closed-form gradients


def _softmax_ce(W: np.ndarray, b: np.ndarray, Y: np.ndarray, labels: np.ndarray, ridge: float = 0.0):
    """Mean cross-entropy (+ ridge/2 |W|^2) and softmax residual (p - onehot) / n."""
    z = Y @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    if ridge:
        loss += 0.5 * ridge * float(np.sum(W * W))
    p = np.exp(z - logsum[:, None])
    p[rows, labels] -= 1.0
    return loss, p / len(labels)


@dataclass
class LinearClassifier:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, d: int, n_classes: int) -> "LinearClassifier":
        return cls(np.zeros((d, n_classes)), np.zeros(n_classes))

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.W.copy(), self.b.copy())


def fit_linear(Y: np.ndarray, labels: np.ndarray, n_classes: int, iters: int = 500,
               init: LinearClassifier | None = None, tol: float = 1e-7,
               ridge: float = 0.0) -> tuple[LinearClassifier, float]:
    """Gradient descent with backtracking on mean cross-entropy.

    ``ridge`` adds ``ridge/2 |W|^2``, which keeps the minimiser finite on
    separable clouds (a soft version of a bounded classifier set). Stops
    when the gradient norm drops below ``tol`` or after ``iters`` steps;
    every accepted step decreases the loss, so warm starts never increase it.
    """
    clf = init.copy() if init is not None else LinearClassifier.zeros(Y.shape[1], n_classes)
    loss, resid = _softmax_ce(clf.W, clf.b, Y, labels, ridge)
    step = 1.0
    for _ in range(iters):
        gW, gb = Y.T @ resid + ridge * clf.W, resid.sum(axis=0)
        gnorm2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        if gnorm2 < tol * tol:
            break
        step *= 2.0
        while step > 1e-12:
            W, b = clf.W - step * gW, clf.b - step * gb
            new_loss, new_resid = _softmax_ce(W, b, Y, labels, ridge)
            if new_loss <= loss - 0.5 * step * gnorm2:
                clf, loss, resid = LinearClassifier(W, b), new_loss, new_resid
                break
            step *= 0.5
        else:
            break
    return clf, loss


def separability(cloud: DiscreteDistribution, n_classes: int | None = None, iters: int = 2000,
                 init: LinearClassifier | None = None, ridge: float = 0.0) -> tuple[float, LinearClassifier]:
    """Estimate of ``Z(cloud)``: the fitted linear classifier's loss."""
    if cloud.labels is None:
        raise DataError("separability needs a labelled cloud")
    n_classes = n_classes or int(cloud.labels.max()) + 1
    clf, loss = fit_linear(cloud.points, cloud.labels, n_classes, iters, init, ridge=ridge)
    return loss, clf


# ---------------------------------------------------------------------------
# minimizing movement oracle


@dataclass
class MmsStepResult:
    output: DiscreteDistribution
    objective: float
    classifier: LinearClassifier
    start_separability: float
    separability: float
    history: list = field(default_factory=list)


def _prox_objective(loss: float, Y: np.ndarray, X: np.ndarray, tau: float) -> float:
    d = Y - X
    return loss + float(np.sum(d * d)) / (2.0 * tau * len(X))


def mms_oracle(rho: DiscreteDistribution, tau: float, inner_iters: int = 50, outer_iters: int = 200,
               classifier: LinearClassifier | None = None, n_classes: int | None = None,
               start_iters: int = 2000, ridge: float = 0.0) -> MmsStepResult:
    """One proximal step of the minimizing movement scheme on particles.

    Particles start at the input points with the classifier fitted there;
    then alternating descent: ``inner_iters`` classifier steps, one
    proximal-gradient step on the positions. Both updates are monotone on
    ``mean CE + |Y - X|^2 / (2 tau n)``, so the result never exceeds the
    value at the start, which is the estimate of ``Z(rho)``.
    """
    if not (tau > 0 and math.isfinite(tau)):
        raise ConfigError(f"tau must be positive and finite, got {tau}")
    if rho.labels is None:
        raise DataError("the oracle needs a labelled cloud")
    X = rho.points
    labels = rho.labels
    n_classes = n_classes or int(labels.max()) + 1
    n = len(X)
    clf, loss = fit_linear(X, labels, n_classes, start_iters, classifier, ridge=ridge)
    start = loss
    Y = X.copy()
    obj = _prox_objective(loss, Y, X, tau)
    history = [obj]
    prox_w = 1.0 / (tau * n)  # curvature of the transport term per coordinate
    step = 1.0
    for _ in range(outer_iters):
        clf, loss = fit_linear(Y, labels, n_classes, inner_iters, clf, ridge=ridge)
        obj = _prox_objective(loss, Y, X, tau)
        _, resid = _softmax_ce(clf.W, clf.b, Y, labels, ridge)
        g = resid @ clf.W.T
        step *= 2.0
        while step > 1e-14:
            # forward step on the loss, exact proximal step on the quadratic
            Y_new = (Y - step * g + step * prox_w * X) / (1.0 + step * prox_w)
            new_loss, _ = _softmax_ce(clf.W, clf.b, Y_new, labels, ridge)
            new_obj = _prox_objective(new_loss, Y_new, X, tau)
            if new_obj <= obj:
                Y, loss, obj = Y_new, new_loss, new_obj
                break
            step *= 0.5
        history.append(obj)
    clf, loss = fit_linear(Y, labels, n_classes, inner_iters, clf, ridge=ridge)
    obj = _prox_objective(loss, Y, X, tau)
    history.append(obj)
    clf_end, end_sep = fit_linear(Y, labels, n_classes, start_iters, clf, ridge=ridge)
    out = DiscreteDistribution(Y, labels.copy())
    return MmsStepResult(out, obj, clf_end, start, end_sep, history)


def mms_chain(rho: DiscreteDistribution, tau: float, steps: int, **kwargs) -> list[MmsStepResult]:
    """Iterate the oracle, warm-starting each step from the last classifier."""
    results = []
    clf = kwargs.pop("classifier", None)
    cloud = rho
    for _ in range(steps):
        res = mms_oracle(cloud, tau, classifier=clf, **kwargs)
        results.append(res)
        cloud, clf = res.output, res.classifier
    return results


# ---------------------------------------------------------------------------
# trained module vs oracle step


@dataclass
class Prop1Report:
    tau: float
    n: int
    d: int
    seed: int
    w2_to_oracle: float
    w2_input_to_oracle: float
    ratio: float | None
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def train_regularized_module(rho: DiscreteDistribution, tau: float, seed: int = 0, blocks: int = 1,
                             hidden: int = 64, train_iters: int = 2000, lr: float = 0.05,
                             momentum: float = 0.9, gain: float = 0.05, ridge: float = 0.0):
    """Fit one residual module plus a linear head on the cloud itself.

    Full-batch SGD on ``CE + ridge/2 |W_head|^2 + |T(x) - x|^2 / (2 tau)``
    (batch means), multiplied by ``min(1, 2 tau)``. The factor leaves the
    minimiser unchanged and keeps the penalty gradient bounded as tau -> 0,
    where plain SGD on the weight ``1/(2 tau)`` would diverge. Returns the
    module (a list of blocks) and head.
    """
    from .engine import transport_penalty
    from .netblocks import AuxiliaryClassifier, ResidualBlock, classify, module_forward
    from .tensor import SgdState, Tensor, add, backward, scale, sgd_step, sum_sq

    rng = np.random.default_rng(seed)
    n_classes = int(rho.labels.max()) + 1
    module = [ResidualBlock.init(rho.d, hidden, gain, rng) for _ in range(blocks)]
    head = AuxiliaryClassifier.init(rho.d, n_classes, gain, rng)
    params = [p for b in module for p in b.parameters()] + head.parameters()
    opt = SgdState(lr=lr, momentum=momentum)
    x = Tensor(rho.points)
    factor = min(1.0, 2.0 * tau)
    for step in range(1, train_iters + 1):
        trace = module_forward(module, x)
        loss, _ = classify(head, trace.output, rho.labels)
        objective = add(loss, transport_penalty(trace, tau, "endpoint"))
        if ridge:
            objective = add(objective, scale(sum_sq(head.W), 0.5 * ridge))
        if factor < 1.0:
            objective = scale(objective, factor)
        backward(objective)
        sgd_step(params, opt, step)
    return module, head


def apply_module(module, points: np.ndarray) -> np.ndarray:
    from .netblocks import module_forward
    from .tensor import Tensor

    return module_forward(module, Tensor(np.asarray(points, dtype=np.float64))).output.values


def verify_prop1(rho: DiscreteDistribution, tau: float, seed: int = 0, train_iters: int = 4000,
                 blocks: int = 1, hidden: int = 64, lr: float = 0.05,
                 inner_iters: int = 50, outer_iters: int = 300, ridge: float = 0.01) -> Prop1Report:
    """Distance between the trained module's pushforward and the oracle step.

    The ratio compares it with how far the oracle moved the input at all.
    """
    if not (tau > 0 and math.isfinite(tau)):
        raise ConfigError(f"tau must be positive and finite on both sides, got {tau}")
    module, _ = train_regularized_module(rho, tau, seed, blocks, hidden, train_iters, lr, ridge=ridge)
    pushed = apply_module(module, rho.points)
    oracle = mms_oracle(rho, tau, inner_iters, outer_iters, ridge=ridge).output.points
    to_oracle = w2(pushed, oracle)
    moved = w2(rho.points, oracle)
    degenerate = moved <= 1e-6
    ratio = None if degenerate else to_oracle / moved
    return Prop1Report(tau, rho.n, rho.d, seed, to_oracle, moved, ratio, degenerate)


# ---------------------------------------------------------------------------
# Hölder stability probe


@dataclass(frozen=True)
class HolderProbeReport:
    exponent: float
    constant: float
    intercept: float
    max_ratio: float
    pairs: int


def holder_probe(fn, support, pairs: int = 200, seed: int = 0) -> HolderProbeReport:
    """Log-log regression of output distances on input distances over pairs.

    ``fn`` maps an (n, d) array to an (n, d') array. Pairs of coincident
    points are redrawn.
    """
    pts = support.points if isinstance(support, DiscreteDistribution) else np.asarray(support, float)
    if pairs < 10:
        raise ConfigError(f"need at least 10 pairs, got {pairs}")
    if len(pts) < 2 or np.all(pts == pts[0]):
        raise DataError("support has no two distinct points")
    rng = np.random.default_rng(seed)
    first, second = [], []
    while len(first) < pairs:
        i, j = rng.integers(len(pts), size=2)
        if i == j or np.array_equal(pts[i], pts[j]):
            continue
        first.append(i)
        second.append(j)
    mapped = np.asarray(fn(pts), dtype=np.float64)
    din = np.linalg.norm(pts[first] - pts[second], axis=1)
    dout = np.linalg.norm(mapped[first] - mapped[second], axis=1)
    keep = dout > 0
    if keep.sum() < 2:
        raise DataError("map collapses every sampled pair")
    slope, intercept = np.polyfit(np.log(din[keep]), np.log(dout[keep]), 1)
    return HolderProbeReport(float(slope), float(np.exp(intercept)), float(intercept),
                             float(np.max(dout / din)), int(pairs))


# ---------------------------------------------------------------------------
# point clouds as delimited text


def save_cloud(cloud: DiscreteDistribution, path) -> None:
    header = [f"x{i}" for i in range(cloud.d)] + (["label"] if cloud.labels is not None else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, p in enumerate(cloud.points):
            row = [repr(float(v)) for v in p]
            if cloud.labels is not None:
                row.append(int(cloud.labels[i]))
            writer.writerow(row)


def load_cloud(path) -> DiscreteDistribution:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty cloud file")
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    d = len(header) - has_label
    try:
        pts = np.array([[float(v) for v in r[:d]] for r in body])
        labels = np.array([int(r[d]) for r in body]) if has_label else None
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return DiscreteDistribution(pts.reshape(len(body), d), labels)
