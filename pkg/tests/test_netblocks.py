import math

import numpy as np
import pytest

from trgl.errors import DataError, DimensionError, FormatError
from trgl.netblocks import (
    AuxiliaryClassifier,
    PartitionSpec,
    ResidualBlock,
    build_partition,
    classify,
    flat_blocks,
    load_checkpoint,
    module_forward,
    named_values,
    save_checkpoint,
)
from trgl.tensor import Tensor


def zero_block(width=2, hidden=3):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    return ResidualBlock(z(width, hidden), z(hidden), z(hidden, width), z(width))


def test_zero_residue_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 2)))
    trace = module_forward([zero_block(), zero_block()], x)
    assert np.array_equal(trace.output.values, x.values)
    assert all(np.all(r.values == 0) for r in trace.residues)
    assert len(trace.states) == 3


def test_constant_residue_shifts_input():
    block = zero_block()
    block.b2.values = np.array([1.0, 0.0])
    x = Tensor([[0.5, -0.5], [2.0, 3.0]])
    out = module_forward([block], x).output.values
    assert np.array_equal(out, x.values + np.array([1.0, 0.0]))


def test_width_mismatch():
    with pytest.raises(DimensionError):
        module_forward([zero_block(width=2)], Tensor(np.ones((1, 3))))


def test_module_is_composition_of_blocks():
    part = build_partition(PartitionSpec(1, 3, 4, 2, 2, 0.5, 0))
    x = part.encode(np.random.default_rng(1).standard_normal((6, 2)))
    h = x
    for block in part.modules[0]:
        h = block.forward(h)
    assert np.array_equal(module_forward(part.modules[0], x).output.values, h.values)


def test_partition_composes_to_flat_network():
    part = build_partition(PartitionSpec(3, 2, 4, 2, 2, 0.5, 3))
    x = np.random.default_rng(2).standard_normal((7, 2))
    h = part.encode(x)
    for block in flat_blocks(part):
        h = block.forward(h)
    assert np.array_equal(part.features(x, 3), h.values)
    assert np.array_equal(part.all_features(x)[-1], h.values)


def test_classify_zero_weights():
    clf = AuxiliaryClassifier(Tensor(np.zeros((4, 10))), Tensor(np.zeros(10)))
    labels = np.array([0, 0, 3, 7, 0, 9])
    loss, acc = classify(clf, Tensor(np.ones((6, 4))), labels)
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert acc == pytest.approx(np.mean(labels == 0))


def test_classify_separable_logits():
    clf = AuxiliaryClassifier(Tensor(np.eye(3) * 10), Tensor(np.zeros(3)))
    loss, acc = classify(clf, Tensor(np.eye(3)), np.array([0, 1, 2]))
    assert acc == 1.0 and loss.item() < 1e-3


def test_classify_mean_invariance():
    rng = np.random.default_rng(4)
    clf = AuxiliaryClassifier(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4)))
    row = rng.standard_normal((1, 3))
    one, _ = classify(clf, Tensor(row), np.array([2]))
    many, _ = classify(clf, Tensor(np.repeat(row, 9, axis=0)), np.full(9, 2))
    assert one.item() == pytest.approx(many.item(), rel=1e-14)


def test_classify_rejects_out_of_range_label():
    clf = AuxiliaryClassifier(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(DataError):
        classify(clf, Tensor(np.ones((1, 2))), np.array([3]))


@pytest.mark.parametrize("K,M", [(10, 1), (2, 7)])
def test_build_partition_shapes(K, M):
    part = build_partition(PartitionSpec(K, M, 64, 784, 10))
    assert part.K == K and len(part.heads) == K
    assert all(len(module) == M for module in part.modules)
    assert part.heads[0].W.shape == (64, 10)


def test_build_partition_seeded_bitwise():
    spec = PartitionSpec(3, 2, 8, 5, 4, 0.1, 11)
    a, b = named_values(build_partition(spec)), named_values(build_partition(spec))
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_module_parameters_include_encoder_only_for_first_stage():
    part = build_partition(PartitionSpec(2, 1, 4, 3, 2))
    first = {id(p) for p in part.module_parameters(1)}
    second = {id(p) for p in part.module_parameters(2)}
    assert id(part.encoder.W) in first and id(part.encoder.W) not in second
    assert not first & second


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(0, 1, 4, 2, 2)
    with pytest.raises(ValueError):
        PartitionSpec(1, 1, 4, 2, 2, init_gain=0.0)


def test_checkpoint_round_trip(tmp_path):
    part = build_partition(PartitionSpec(2, 2, 6, 3, 4, 0.2, 5, hidden=9))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(part, path, {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"} and loaded.spec == part.spec
    a, b = named_values(part), named_values(loaded)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_checkpoint_without_metadata(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, w=np.zeros(2))
    with pytest.raises(FormatError):
        load_checkpoint(path)
