"""Method-of-multipliers schedule for the loss weight of each module.

Each module k minimises ``lam_k * L + W`` where W is the unweighted kinetic
energy. Every ``period`` optimiser steps the weight grows by ``increase``
times the loss measured right after the step, so modules whose loss stays
high end up constrained less by the transport term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError
from .tensor import Tensor, add, scale


@dataclass(frozen=True)
class MultiplierConfig:
    initial: float = 1.0
    increase: float = 1.0
    period: int = 50
    same_batch: bool = False

    def __post_init__(self):
        # increase == 0 is allowed: it pins lambda and reproduces a fixed-weight run
        if self.initial < 0 or self.increase < 0 or self.period < 1:
            raise ValueError(
                f"need initial >= 0, increase >= 0, period >= 1; got {self.initial}, "
                f"{self.increase}, {self.period}"
            )


@dataclass
class MultiplierState:
    """Current weight and iteration counter (starting at 1) for every module."""

    weights: list[float]
    counters: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.counters:
            self.counters = [1] * len(self.weights)

    @classmethod
    def fresh(cls, n_modules: int, config: MultiplierConfig) -> "MultiplierState":
        return cls([float(config.initial)] * n_modules)

    def weight(self, k: int) -> float:
        return self.weights[k - 1]


def multiplier_objective(loss: Tensor, penalty_raw: Tensor, state: MultiplierState, k: int) -> Tensor:
    return add(scale(loss, state.weight(k)), penalty_raw)


def multiplier_update(state: MultiplierState, config: MultiplierConfig, k: int, fresh_loss: float) -> MultiplierState:
    """Advance module ``k`` by one iteration, growing its weight when due.

    ``fresh_loss`` is the loss after the parameter step of the current
    iteration (on the next batch unless ``config.same_batch``).
    """
    fresh_loss = float(fresh_loss)
    if fresh_loss < 0:
        raise ContractError(f"loss must be non-negative, got {fresh_loss}")
    i = state.counters[k - 1]
    if i % config.period == 0:
        state.weights[k - 1] = state.weights[k - 1] + config.increase * fresh_loss
    state.counters[k - 1] = i + 1
    return state
