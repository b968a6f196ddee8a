"""Experiment configuration: strict YAML schema, resolution, round trip.

Unknown keys are rejected with the dotted field path and the line number
in the source file, so a typo never silently falls back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import yaml

from .engine import PENALTY_FORMS, REGIMES, TAU_MODES, EpochSchedule, TauSchedule, TrainPlan
from .errors import ConfigError
from .multiplier import MultiplierConfig
from .netblocks import PartitionSpec

DATASET_KINDS = ("two_moons", "gaussian_mixture", "mnist")

SCHEMA: dict[str, Any] = {
    "name": str,
    "seeds": list,
    "dataset": {
        "kind": str, "n": int, "test_n": int, "noise": float, "centers": (list, type(None)), "sigma": float,
        "train_size": (int, type(None)), "val_fraction": float, "balanced": bool,
    },
    "network": {"K": int, "M": int, "width": int, "hidden": (int, type(None)), "init_gain": float},
    "plan": {
        "regime": str, "epochs": (int, dict), "laps": int, "batch_size": int, "lr": float,
        "momentum": float, "weight_decay": float, "lr_milestones": list, "lr_gamma": float,
        "penalty": str,
    },
    "tau": {
        "mode": str, "value": (float, list),
        "multiplier": {"initial": float, "increase": float, "period": int, "same_batch": bool},
    },
    "report": {"head_policy": str, "checkpoints": bool},
}

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seeds": [0],
    "dataset": {"kind": "two_moons", "n": 2000, "test_n": 2000, "noise": 0.2, "centers": None,
                "sigma": 0.5, "train_size": None, "val_fraction": 0.1, "balanced": False},
    "network": {"K": 4, "M": 1, "width": 32, "hidden": None, "init_gain": 0.05},
    "plan": {"regime": "sequential", "epochs": 10, "laps": 1, "batch_size": 128, "lr": 0.007,
             "momentum": 0.9, "weight_decay": 0.0, "lr_milestones": [], "lr_gamma": 0.2,
             "penalty": "residue_sum"},
    "tau": {"mode": "fixed", "value": 0.5,
            "multiplier": {"initial": 1.0, "increase": 1.0, "period": 50, "same_batch": False}},
    "report": {"head_policy": "last", "checkpoints": True},
}


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """Map dotted key paths to 1-based source lines from a composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _line_index(value, sub, out)
    return out


def _where(path: tuple, lines: dict) -> str:
    dotted = ".".join(path)
    line = lines.get(path)
    return f"{dotted} (line {line})" if line else dotted


def _check(raw: dict, schema: dict, path: tuple, lines: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{_where(path, lines) or 'config'}: expected a mapping, got {type(raw).__name__}")
    for key, value in raw.items():
        sub = path + (str(key),)
        if key not in schema:
            raise ConfigError(f"{_where(sub, lines)}: unknown key (allowed: {', '.join(sorted(schema))})")
        expected = schema[key]
        if isinstance(expected, dict):
            _check(value, expected, sub, lines)
            continue
        types = expected if isinstance(expected, tuple) else (expected,)
        if float in types and isinstance(value, int) and not isinstance(value, bool):
            continue
        if isinstance(value, bool) and bool not in types:
            raise ConfigError(f"{_where(sub, lines)}: expected {'/'.join(t.__name__ for t in types)}, got bool")
        if not isinstance(value, types):
            raise ConfigError(f"{_where(sub, lines)}: expected {'/'.join(t.__name__ for t in types)}, "
                              f"got {type(value).__name__}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _as_float(value) -> float:
    return float("inf") if value in ("inf", ".inf") else float(value)


@dataclass
class ExperimentConfig:
    """Fully resolved configuration; ``to_dict`` gives the canonical form."""

    raw: dict = field(default_factory=dict)

    # -- parsing ---------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict | None, lines: dict | None = None) -> "ExperimentConfig":
        data = data or {}
        lines = lines or {}
        _check(data, SCHEMA, (), lines)
        cfg = cls(_merge(DEFAULTS, data))
        cfg._validate(lines)
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from None
        return cls.from_dict(data, _line_index(node) if node is not None else {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_yaml(text)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def run_id(self, seeds=None) -> str:
        payload = {"config": self.to_dict(), "seeds": list(seeds if seeds is not None else self.seeds)}
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def _validate(self, lines: dict) -> None:
        r = self.raw
        ds, net, plan, tau = r["dataset"], r["network"], r["plan"], r["tau"]

        def fail(path, msg):
            raise ConfigError(f"{_where(path, lines)}: {msg}")

        if ds["kind"] not in DATASET_KINDS:
            fail(("dataset", "kind"), f"must be one of {DATASET_KINDS}, got {ds['kind']!r}")
        if ds["kind"] == "gaussian_mixture" and not ds["centers"]:
            fail(("dataset", "centers"), "gaussian_mixture needs a list of centers")
        if not 0.0 <= ds["val_fraction"] < 1.0:
            fail(("dataset", "val_fraction"), f"must lie in [0, 1), got {ds['val_fraction']}")
        if not r["seeds"] or not all(isinstance(s, int) and not isinstance(s, bool) for s in r["seeds"]):
            fail(("seeds",), "must be a non-empty list of integers")
        if len(set(r["seeds"])) != len(r["seeds"]):
            fail(("seeds",), "duplicate seeds")
        for key in ("K", "M", "width"):
            if net[key] < 1:
                fail(("network", key), f"must be >= 1, got {net[key]}")
        if net["init_gain"] <= 0:
            fail(("network", "init_gain"), "must be positive")
        if plan["regime"] not in REGIMES:
            fail(("plan", "regime"), f"must be one of {REGIMES}, got {plan['regime']!r}")
        if plan["penalty"] not in PENALTY_FORMS:
            fail(("plan", "penalty"), f"must be one of {PENALTY_FORMS}, got {plan['penalty']!r}")
        if isinstance(plan["epochs"], dict):
            _check(plan["epochs"], {"base": int, "per_module": int}, ("plan", "epochs"), lines)
            if "base" not in plan["epochs"]:
                fail(("plan", "epochs"), "schedule needs a 'base' entry")
        if plan["lr"] <= 0:
            fail(("plan", "lr"), "must be positive")
        if tau["mode"] not in TAU_MODES:
            fail(("tau", "mode"), f"must be one of {TAU_MODES}, got {tau['mode']!r}")
        values = self.tau_values
        if tau["mode"] in ("fixed", "midpoint_doubled") and not all(v > 0 for v in values):
            fail(("tau", "value"), f"every tau must be positive, got {values}")
        try:
            self.partition_spec(0)
            for v in values:
                plan_obj = self.train_plan(0, v)
                for k in range(1, net["K"] + 1):
                    if plan_obj.epochs_for(k) < plan_obj.laps and plan["regime"] == "multilap":
                        fail(("plan", "epochs"), f"module {k} has {plan_obj.epochs_for(k)} epochs, "
                                                 f"fewer than {plan_obj.laps} laps")
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    # -- resolved views ----------------------------------------------------
    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def tau_values(self) -> list[float]:
        v = self.raw["tau"]["value"]
        return [_as_float(x) for x in (v if isinstance(v, list) else [v])]

    def with_seeds(self, seeds) -> "ExperimentConfig":
        raw = self.to_dict()
        raw["seeds"] = list(seeds)
        return ExperimentConfig.from_dict(raw)

    def partition_spec(self, seed: int, input_dim: int | None = None, n_classes: int | None = None) -> PartitionSpec:
        net, ds = self.raw["network"], self.raw["dataset"]
        if input_dim is None:
            input_dim = {"mnist": 784}.get(ds["kind"], len(ds["centers"][0]) if ds["centers"] else 2)
        if n_classes is None:
            n_classes = {"mnist": 10, "two_moons": 2}.get(ds["kind"], len(ds["centers"] or [0, 0]))
        return PartitionSpec(net["K"], net["M"], net["width"], input_dim, n_classes,
                             float(net["init_gain"]), seed, net["hidden"])

    def tau_schedule(self, value: float) -> TauSchedule:
        t = self.raw["tau"]
        if t["mode"] == "multiplier":
            m = t["multiplier"]
            return TauSchedule("multiplier", value, MultiplierConfig(float(m["initial"]), float(m["increase"]),
                                                                     int(m["period"]), bool(m["same_batch"])))
        return TauSchedule(t["mode"], value)

    def train_plan(self, seed: int, tau_value: float) -> TrainPlan:
        p = self.raw["plan"]
        epochs = p["epochs"]
        if isinstance(epochs, dict):
            epochs = EpochSchedule(int(epochs["base"]), int(epochs.get("per_module", 0)))
        return TrainPlan(
            regime=p["regime"], epochs=epochs, laps=int(p["laps"]), batch_size=int(p["batch_size"]),
            lr=float(p["lr"]), momentum=float(p["momentum"]), weight_decay=float(p["weight_decay"]),
            lr_milestones=tuple(int(m) for m in p["lr_milestones"]), lr_gamma=float(p["lr_gamma"]),
            tau=self.tau_schedule(tau_value), penalty=p["penalty"], seed=seed,
        )
