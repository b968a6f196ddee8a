"""Fully connected residual trunk split into K modules of M blocks each.

Naming follows the "K-M ResNet" convention: K modules, M residual blocks per
module, one auxiliary linear classifier after every module. The encoder maps
raw inputs to the trunk width and is optimised together with module 1.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .tensor import (
    Tensor,
    add,
    add_bias,
    matmul,
    orthogonal_init,
    relu,
    softmax_cross_entropy,
)

CHECKPOINT_VERSION = 1


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


@dataclass
class ResidualBlock:
    """``T(x) = x + W2 relu(W1 x + b1) + b2`` with equal input/output width."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, width: int, hidden: int, gain: float, rng: np.random.Generator) -> "ResidualBlock":
        return cls(
            orthogonal_init(width, hidden, gain, rng),
            _zeros(hidden),
            orthogonal_init(hidden, width, gain, rng),
            _zeros(width),
        )

    @property
    def width(self) -> int:
        return self.W1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def residue(self, x: Tensor) -> Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.width:
            raise DimensionError("residual_block", x.shape, (None, self.width))
        return add_bias(matmul(relu(add_bias(matmul(x, self.W1), self.b1)), self.W2), self.b2)

    def forward(self, x: Tensor) -> Tensor:
        return add(x, self.residue(x))


@dataclass
class Encoder:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, input_dim: int, width: int, gain: float, rng: np.random.Generator) -> "Encoder":
        return cls(orthogonal_init(input_dim, width, gain, rng), _zeros(width))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def forward(self, x: Tensor) -> Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.W.shape[0]:
            raise DimensionError("encoder", x.shape, self.W.shape)
        return relu(add_bias(matmul(x, self.W), self.b))


@dataclass
class AuxiliaryClassifier:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, width: int, n_classes: int, gain: float, rng: np.random.Generator) -> "AuxiliaryClassifier":
        return cls(orthogonal_init(width, n_classes, gain, rng), _zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def logits(self, state: Tensor) -> Tensor:
        if state.values.ndim != 2 or state.shape[1] != self.W.shape[0]:
            raise DimensionError("classify", state.shape, self.W.shape)
        return add_bias(matmul(state, self.W), self.b)


@dataclass
class ModuleTrace:
    """Block-by-block states of one module on a batch.

    ``states[m]`` is the input of block m (``states[0]`` the module input,
    ``states[-1]`` its output) and ``residues[m] = r_m(states[m])``.
    """

    states: list[Tensor]
    residues: list[Tensor]

    @property
    def input(self) -> Tensor:
        return self.states[0]

    @property
    def output(self) -> Tensor:
        return self.states[-1]


def module_forward(module: list[ResidualBlock], x: Tensor) -> ModuleTrace:
    states, residues = [x], []
    for block in module:
        r = block.residue(states[-1])
        residues.append(r)
        states.append(add(states[-1], r))
    return ModuleTrace(states, residues)


def classify(classifier: AuxiliaryClassifier, state: Tensor, labels) -> tuple[Tensor, float]:
    """Mean softmax cross-entropy and argmax accuracy (ties go to the lowest class)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classifier.n_classes):
        raise DataError(f"labels must lie in [0, {classifier.n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    logits = classifier.logits(state)
    loss = softmax_cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits.values, axis=1) == labels))
    return loss, acc


@dataclass(frozen=True)
class PartitionSpec:
    K: int
    M: int
    width: int
    input_dim: int
    n_classes: int
    init_gain: float = 0.05
    seed: int = 0
    hidden: int | None = None

    def __post_init__(self):
        for name in ("K", "M", "width", "input_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if not self.init_gain > 0:
            raise ValueError(f"init_gain must be positive, got {self.init_gain}")

    @property
    def hidden_width(self) -> int:
        return self.hidden or self.width


@dataclass
class NetworkPartition:
    spec: PartitionSpec
    encoder: Encoder
    modules: list[list[ResidualBlock]]
    heads: list[AuxiliaryClassifier]

    @property
    def K(self) -> int:
        return len(self.modules)

    def module_parameters(self, k: int) -> list[Tensor]:
        """Trainable tensors of stage ``k`` (1-based): blocks, head, encoder if k == 1."""
        params = [p for block in self.modules[k - 1] for p in block.parameters()]
        params += self.heads[k - 1].parameters()
        if k == 1:
            params = self.encoder.parameters() + params
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"encoder.W": self.encoder.W, "encoder.b": self.encoder.b}
        for k, module in enumerate(self.modules, start=1):
            for m, block in enumerate(module):
                for name in ("W1", "b1", "W2", "b2"):
                    out[f"module{k}.block{m}.{name}"] = getattr(block, name)
        for k, head in enumerate(self.heads, start=1):
            out[f"head{k}.W"] = head.W
            out[f"head{k}.b"] = head.b
        return out

    def encode(self, x) -> Tensor:
        return self.encoder.forward(x if isinstance(x, Tensor) else Tensor(x))

    def features(self, x, k: int) -> np.ndarray:
        """Values of ``G_k`` applied to encoded inputs (no graph kept)."""
        h = Tensor(self.encode(np.asarray(x)).values)
        for module in self.modules[:k]:
            h = Tensor(module_forward(module, h).output.values)
        return h.values

    def all_features(self, x) -> list[np.ndarray]:
        """``[G_1(x), ..., G_K(x)]`` after encoding, computed in one sweep."""
        h = Tensor(self.encode(np.asarray(x)).values)
        out = []
        for module in self.modules:
            h = Tensor(module_forward(module, h).output.values)
            out.append(h.values)
        return out

    def head_accuracies(self, x, y) -> list[float]:
        y = np.asarray(y)
        accs = []
        for head, feats in zip(self.heads, self.all_features(x)):
            logits = feats @ head.W.values + head.b.values
            accs.append(float(np.mean(np.argmax(logits, axis=1) == y)))
        return accs


def build_partition(spec: PartitionSpec) -> NetworkPartition:
    rng = np.random.default_rng(spec.seed)
    encoder = Encoder.init(spec.input_dim, spec.width, spec.init_gain, rng)
    modules = [
        [ResidualBlock.init(spec.width, spec.hidden_width, spec.init_gain, rng) for _ in range(spec.M)]
        for _ in range(spec.K)
    ]
    heads = [AuxiliaryClassifier.init(spec.width, spec.n_classes, spec.init_gain, rng) for _ in range(spec.K)]
    return NetworkPartition(spec, encoder, modules, heads)


def flat_blocks(partition: NetworkPartition) -> list[ResidualBlock]:
    return [block for module in partition.modules for block in module]


def named_values(partition: NetworkPartition) -> dict[str, np.ndarray]:
    """Copies of every parameter array, keyed like ``named_parameters``."""
    return {name: t.values.copy() for name, t in partition.named_parameters().items()}


# ---------------------------------------------------------------------------
# checkpoints: a .npz archive, one array per named parameter plus metadata


def save_checkpoint(partition: NetworkPartition, path, extra: dict | None = None) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "spec": asdict(partition.spec), "extra": extra or {}}
    arrays = {name: t.values for name, t in partition.named_parameters().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[NetworkPartition, dict]:
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise FormatError(f"{path}: missing checkpoint metadata")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        partition = build_partition(PartitionSpec(**meta["spec"]))
        for name, tensor in partition.named_parameters().items():
            if name not in archive:
                raise FormatError(f"{path}: missing parameter {name}")
            values = archive[name]
            if values.shape != tensor.shape:
                raise FormatError(f"{path}: {name} has shape {values.shape}, expected {tensor.shape}")
            tensor.values = values.astype(np.float64, copy=True)
    return partition, meta.get("extra", {})
