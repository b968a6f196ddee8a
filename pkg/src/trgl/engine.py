"""Module-wise training with the kinetic-energy (transport) penalty.

Three regimes share one per-batch update (``_local_step``):

* sequential: module k trains to completion on the frozen outputs of 1..k-1;
* parallel: every batch flows through all modules, each one stepping on its
  own local objective with its input treated as a constant;
* multi-lap: R sequential sweeps of ``epochs(k) // R`` epochs each.

Penalties are batch means of per-sample squared displacements, so tau does
not depend on batch size.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, NumericalError
from .multiplier import MultiplierConfig, MultiplierState, multiplier_objective, multiplier_update
from .netblocks import ModuleTrace, NetworkPartition, PartitionSpec, classify, module_forward
from .tensor import SgdState, Tensor, add, backward, scale, sgd_step, step_decay, sum_sq

REGIMES = ("sequential", "parallel", "multilap")
PENALTY_FORMS = ("residue_sum", "endpoint")
TAU_MODES = ("off", "fixed", "midpoint_doubled", "multiplier")

METRIC_COLUMNS = ("regime", "module", "lap", "epoch", "train_loss", "penalty", "train_acc",
                  "val_acc", "test_acc", "mean_sq_displacement")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EpochSchedule:
    """``epochs(k) = base + per_module * k``."""

    base: int
    per_module: int = 0

    def __call__(self, k: int) -> int:
        return self.base + self.per_module * k


@dataclass(frozen=True)
class TauSchedule:
    mode: str = "fixed"
    tau: float = 0.5
    multiplier: MultiplierConfig | None = None

    def __post_init__(self):
        if self.mode not in TAU_MODES:
            raise ConfigError(f"tau mode must be one of {TAU_MODES}, got {self.mode!r}")
        if self.mode in ("fixed", "midpoint_doubled") and not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.mode == "multiplier" and self.multiplier is None:
            object.__setattr__(self, "multiplier", MultiplierConfig())

    @property
    def regularized(self) -> bool:
        return self.mode != "off"

    def tau_k(self, k: int, K: int) -> float:
        if self.mode == "midpoint_doubled" and k > K / 2:
            return 2.0 * self.tau
        return self.tau

    def weight(self, k: int, K: int) -> float:
        """Coefficient 1/(2 tau_k) of the kinetic energy (0 for tau = inf)."""
        return 1.0 / (2.0 * self.tau_k(k, K))


@dataclass
class TrainPlan:
    regime: str = "sequential"
    epochs: Union[int, EpochSchedule, Callable[[int], int]] = 10
    laps: int = 1
    batch_size: int = 128
    lr: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: tuple = ()
    lr_gamma: float = 0.2
    tau: TauSchedule = field(default_factory=TauSchedule)
    penalty: str = "residue_sum"
    seed: int = 0
    check_decoupling: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.penalty not in PENALTY_FORMS:
            raise ConfigError(f"penalty must be one of {PENALTY_FORMS}, got {self.penalty!r}")
        if self.laps < 1:
            raise ConfigError(f"laps must be >= 1, got {self.laps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def epochs_for(self, k: int) -> int:
        n = self.epochs if isinstance(self.epochs, int) else int(self.epochs(k))
        if n < 1:
            raise ConfigError(f"epochs({k}) = {n}; every module needs at least one epoch")
        return n

    def new_optimizer(self) -> SgdState:
        lr = step_decay(self.lr, self.lr_milestones, self.lr_gamma) if self.lr_milestones else self.lr
        return SgdState(lr=lr, momentum=self.momentum, weight_decay=self.weight_decay)


def lap_epochs(total: int, laps: int) -> list[int]:
    """Split ``total`` epochs over ``laps``; the remainder goes to the last lap."""
    if total < laps:
        raise ConfigError(f"{total} epochs cannot fill {laps} laps")
    per = [total // laps] * laps
    per[-1] += total - sum(per)
    return per


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    rows: list[dict] = field(default_factory=list)
    with_lambda: bool = False

    @property
    def columns(self) -> tuple[str, ...]:
        return METRIC_COLUMNS + (("lambda",) if self.with_lambda else ())

    def append(self, row: dict) -> None:
        for key in self.columns[4:]:
            if not math.isfinite(row[key]):
                raise NumericalError(f"non-finite {key} = {row[key]}", row["module"], row["epoch"])
        self.rows.append(row)

    def modules(self) -> list[int]:
        return sorted({r["module"] for r in self.rows})

    def series(self, module: int, column: str) -> list[float]:
        return [r[column] for r in self.rows if r["module"] == module]

    def final(self, column: str) -> list[float]:
        """Last recorded value of ``column`` for each module, in module order."""
        last = {}
        for r in self.rows:
            last[r["module"]] = r[column]
        return [last[k] for k in sorted(last)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.columns])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricsRecord":
        reader = csv.DictReader(io.StringIO(text))
        with_lambda = "lambda" in (reader.fieldnames or [])
        rec = cls(with_lambda=with_lambda)
        for raw in reader:
            row = {"regime": raw["regime"]}
            for key in ("module", "lap", "epoch"):
                row[key] = int(raw[key])
            for key in rec.columns[4:]:
                row[key] = float(raw[key])
            rec.rows.append(row)
        return rec

    @classmethod
    def load(cls, path) -> "MetricsRecord":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def select_head(metrics: MetricsRecord, policy: str = "best-by-validation") -> int:
    """1-based index of the head to deploy."""
    final = metrics.final("val_acc")
    if policy == "last":
        return len(final)
    if policy == "best-by-validation":
        return int(np.argmax(final)) + 1
    raise ConfigError(f"unknown head policy {policy!r}")


# ---------------------------------------------------------------------------
# penalty


def kinetic_energy(trace: ModuleTrace, form: str = "residue_sum") -> Tensor:
    """Batch mean of the per-sample squared displacement, unweighted."""
    batch = trace.input.shape[0]
    if form == "residue_sum":
        total = sum_sq(trace.residues[0])
        for r in trace.residues[1:]:
            total = add(total, sum_sq(r))
    elif form == "endpoint":
        total = sum_sq(add(trace.output, scale(trace.input, -1.0)))
    else:
        raise ConfigError(f"unknown penalty form {form!r}")
    return scale(total, 1.0 / batch)


def transport_penalty(trace: ModuleTrace, tau: float, form: str = "residue_sum") -> Tensor:
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return scale(kinetic_energy(trace, form), 1.0 / (2.0 * tau))


def _kinetic_value(trace: ModuleTrace, form: str) -> float:
    if form == "residue_sum":
        total = sum(float(np.sum(r.values * r.values)) for r in trace.residues)
    else:
        d = trace.output.values - trace.input.values
        total = float(np.sum(d * d))
    return total / trace.input.shape[0]


# ---------------------------------------------------------------------------
# training internals


class _Trainer:
    """Per-run mutable state: optimisers, step counters, multiplier weights."""

    def __init__(self, partition: NetworkPartition, plan: TrainPlan, data: Dataset):
        if len(data.part("train")) == 0:
            raise DataError("training split is empty")
        self.partition = partition
        self.plan = plan
        self.K = partition.K
        self.data = data
        self.train_x, self.train_y = data.xy("train")
        self.val_x, self.val_y = data.xy("val")
        self.test_x, self.test_y = data.xy("test")
        self.rng = np.random.default_rng([plan.seed, 7])
        self.optimizers = [plan.new_optimizer() for _ in range(self.K)]
        self.steps = [0] * self.K
        self.mult_cfg = plan.tau.multiplier if plan.tau.mode == "multiplier" else None
        self.mult = MultiplierState.fresh(self.K, self.mult_cfg) if self.mult_cfg else None
        self.mult_pending = [False] * self.K
        self.metrics = MetricsRecord(with_lambda=self.mult is not None)

    # one optimiser step of stage k on a constant input batch
    def local_step(self, k: int, x_in: np.ndarray, y: np.ndarray):
        p = self.partition
        h = p.encode(Tensor(x_in)) if k == 1 else Tensor(x_in)
        trace = module_forward(p.modules[k - 1], h)
        loss, acc = classify(p.heads[k - 1], trace.output, y)
        tau = self.plan.tau
        if self.mult is not None:
            if self.mult_pending[k - 1] and not self.mult_cfg.same_batch:
                multiplier_update(self.mult, self.mult_cfg, k, loss.item())
            objective = multiplier_objective(loss, kinetic_energy(trace, self.plan.penalty), self.mult, k)
        elif tau.regularized:
            objective = add(loss, scale(kinetic_energy(trace, self.plan.penalty), tau.weight(k, self.K)))
        else:
            objective = loss
        if not math.isfinite(objective.item()):
            raise NumericalError(f"non-finite objective {objective.item()}", k, None)
        backward(objective)
        params = p.module_parameters(k)
        if self.plan.check_decoupling:
            _assert_decoupled(objective, params)
        self.steps[k - 1] += 1
        sgd_step(params, self.optimizers[k - 1], self.steps[k - 1])
        if self.mult is not None:
            if self.mult_cfg.same_batch:
                fresh, _ = self.eval_loss(k, x_in, y)
                multiplier_update(self.mult, self.mult_cfg, k, fresh)
            else:
                self.mult_pending[k - 1] = True
        return loss.item(), acc, _kinetic_value(trace, self.plan.penalty), trace.output.values

    def eval_loss(self, k: int, x_in: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        p = self.partition
        h = p.encode(Tensor(x_in)) if k == 1 else Tensor(x_in)
        out = module_forward(p.modules[k - 1], h).output
        loss, acc = classify(p.heads[k - 1], Tensor(out.values), y)
        return loss.item(), acc

    def module_outputs(self, k: int, x_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(module input after encoding, module output) for stage k, no graph."""
        p = self.partition
        h = p.encode(Tensor(x_in)).values if k == 1 else x_in
        out = module_forward(p.modules[k - 1], Tensor(h)).output.values
        return h, out

    def head_accuracy(self, k: int, feats: np.ndarray, y: np.ndarray) -> float:
        head = self.partition.heads[k - 1]
        logits = feats @ head.W.values + head.b.values
        return float(np.mean(np.argmax(logits, axis=1) == y))

    def batches(self, n: int):
        perm = self.rng.permutation(n)
        bs = self.plan.batch_size
        return [perm[i:i + bs] for i in range(0, n, bs)]

    def record(self, k: int, lap: int, epoch: int, sums: dict, n: int,
               train_in: np.ndarray, val_in: np.ndarray, test_in: np.ndarray) -> None:
        h_tr, out_tr = self.module_outputs(k, train_in)
        _, out_va = self.module_outputs(k, val_in)
        _, out_te = self.module_outputs(k, test_in)
        disp = out_tr - h_tr
        row = {
            "regime": self.plan.regime,
            "module": k,
            "lap": lap,
            "epoch": epoch,
            "train_loss": sums["loss"] / n,
            "penalty": sums["penalty"] / n,
            "train_acc": sums["acc"] / n,
            "val_acc": self.head_accuracy(k, out_va, self.val_y),
            "test_acc": self.head_accuracy(k, out_te, self.test_y),
            "mean_sq_displacement": float(np.mean(np.sum(disp * disp, axis=1))),
        }
        if self.mult is not None:
            row["lambda"] = self.mult.weight(k)
        try:
            self.metrics.append(row)
        except NumericalError as exc:
            raise NumericalError(str(exc).split(" (")[0], k, epoch) from None

    def run_epoch(self, k: int, x_in: np.ndarray, y: np.ndarray, epoch: int) -> dict:
        sums = {"loss": 0.0, "acc": 0.0, "penalty": 0.0}
        for idx in self.batches(len(y)):
            try:
                loss, acc, pen, _ = self.local_step(k, x_in[idx], y[idx])
            except NumericalError as exc:
                raise NumericalError(str(exc).split(" (")[0], k, epoch) from None
            sums["loss"] += loss * len(idx)
            sums["acc"] += acc * len(idx)
            sums["penalty"] += pen * len(idx)
        return sums

    def sweep(self, lap: int, epochs_of: Callable[[int], int], first_epoch: list[int]) -> None:
        x_tr, x_va, x_te = self.train_x, self.val_x, self.test_x
        for k in range(1, self.K + 1):
            for _ in range(epochs_of(k)):
                first_epoch[k - 1] += 1
                sums = self.run_epoch(k, x_tr, self.train_y, first_epoch[k - 1])
                self.record(k, lap, first_epoch[k - 1], sums, len(self.train_y), x_tr, x_va, x_te)
            # frozen from here on: cache this module's outputs as the next input
            x_tr = self.module_outputs(k, x_tr)[1]
            x_va = self.module_outputs(k, x_va)[1]
            x_te = self.module_outputs(k, x_te)[1]


def _assert_decoupled(objective: Tensor, params: list[Tensor]) -> None:
    from .tensor import reachable_leaves

    allowed = {id(t) for t in params}
    leaked = [t for t in reachable_leaves(objective) if id(t) not in allowed]
    if leaked:
        raise AssertionError(f"local objective reaches {len(leaked)} parameters outside its module")


# ---------------------------------------------------------------------------
# regimes


def _check_regime(plan: TrainPlan, expected: str) -> None:
    if plan.regime != expected:
        raise ConfigError(f"plan.regime is {plan.regime!r}, expected {expected!r}")


def train_sequential(partition: NetworkPartition, plan: TrainPlan, data: Dataset) -> MetricsRecord:
    _check_regime(plan, "sequential")
    trainer = _Trainer(partition, plan, data)
    trainer.sweep(0, plan.epochs_for, [0] * trainer.K)
    return trainer.metrics


def train_multilap(partition: NetworkPartition, plan: TrainPlan, data: Dataset) -> MetricsRecord:
    _check_regime(plan, "multilap")
    trainer = _Trainer(partition, plan, data)
    split = {k: lap_epochs(plan.epochs_for(k), plan.laps) for k in range(1, trainer.K + 1)}
    done = [0] * trainer.K
    for lap in range(plan.laps):
        trainer.sweep(lap, lambda k: split[k][lap], done)
    return trainer.metrics


def train_parallel(partition: NetworkPartition, plan: TrainPlan, data: Dataset) -> MetricsRecord:
    _check_regime(plan, "parallel")
    trainer = _Trainer(partition, plan, data)
    K = trainer.K
    counts = {plan.epochs_for(k) for k in range(1, K + 1)}
    if len(counts) != 1:
        raise ConfigError("parallel training needs the same epoch count for every module")
    n_epochs = counts.pop()
    n = len(trainer.train_y)
    for epoch in range(1, n_epochs + 1):
        sums = [{"loss": 0.0, "acc": 0.0, "penalty": 0.0} for _ in range(K)]
        for idx in trainer.batches(n):
            h, y = trainer.train_x[idx], trainer.train_y[idx]
            for k in range(1, K + 1):
                try:
                    loss, acc, pen, h = trainer.local_step(k, h, y)
                except NumericalError as exc:
                    raise NumericalError(str(exc).split(" (")[0], k, epoch) from None
                sums[k - 1]["loss"] += loss * len(idx)
                sums[k - 1]["acc"] += acc * len(idx)
                sums[k - 1]["penalty"] += pen * len(idx)
        x_tr, x_va, x_te = trainer.train_x, trainer.val_x, trainer.test_x
        for k in range(1, K + 1):
            trainer.record(k, 0, epoch, sums[k - 1], n, x_tr, x_va, x_te)
            x_tr = trainer.module_outputs(k, x_tr)[1]
            x_va = trainer.module_outputs(k, x_va)[1]
            x_te = trainer.module_outputs(k, x_te)[1]
    return trainer.metrics


def train(partition: NetworkPartition, plan: TrainPlan, data: Dataset) -> MetricsRecord:
    runner = {"sequential": train_sequential, "parallel": train_parallel, "multilap": train_multilap}
    return runner[plan.regime](partition, plan, data)


# ---------------------------------------------------------------------------
# memory accounting


@dataclass(frozen=True)
class MemoryAccount:
    """Peak stored scalars (parameters incl. grads/velocities, activations)."""

    regime: str
    K: int
    parameters: int
    activations: int
    e2e_parameters: int
    e2e_activations: int

    @property
    def total(self) -> int:
        return self.parameters + self.activations

    @property
    def e2e_total(self) -> int:
        return self.e2e_parameters + self.e2e_activations

    @property
    def saved_pct(self) -> float:
        return 100.0 * (1.0 - self.total / self.e2e_total)


def memory_account(spec: PartitionSpec, plan: TrainPlan, batch: int) -> MemoryAccount:
    """Analytic scalar counts for one training step at the given batch size.

    Every trained parameter costs three scalars (value, grad, momentum
    buffer), a frozen one costs one. A block stores its input and hidden
    activation; its residue is the difference of consecutive block inputs,
    so the penalty needs no extra storage. The encoder stores its input and
    output, a head its input and logits. Frozen prefixes are run forward
    only.
    """
    d, h, D, C, B = spec.width, spec.hidden_width, spec.input_dim, spec.n_classes, batch
    K, M = spec.K, spec.M
    p_enc = D * d + d
    p_block = d * h + h + h * d + d
    p_head = d * C + C
    a_enc = B * (D + d)
    a_block = B * (d + h)
    a_head = B * (d + C)

    e2e_params = 3 * (p_enc + K * M * p_block + p_head)
    e2e_acts = a_enc + K * M * a_block + a_head

    def stage_acts(k):
        return (a_enc if k == 1 else 0) + M * a_block + a_head

    def stage_params(k):
        return (p_enc if k == 1 else 0) + M * p_block + p_head

    if plan.regime == "parallel":
        params = 3 * (p_enc + K * M * p_block + K * p_head)
        acts = max(stage_acts(k) for k in range(1, K + 1))
    else:
        params, acts = 0, 0
        for k in range(1, K + 1):
            frozen = (p_enc if k > 1 else 0) + (k - 1) * M * p_block
            params_k = 3 * stage_params(k) + frozen
            if params_k + stage_acts(k) > params + acts:
                params, acts = params_k, stage_acts(k)
    return MemoryAccount(plan.regime, K, params, acts, e2e_params, e2e_acts)
