import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cwmstream.metrics import (AbtConfig, ConfusionMatrix, abt_eval, abt_sweep, confusion_at, miou,
                               write_sweep_csv)
from cwmstream.net import build_toynet
from cwmstream.synth import SynthConfig, generate_split

from oracles import confusion_loops

labels = hnp.arrays(np.int64, st.integers(1, 40), elements=st.integers(0, 3))


def test_perfect_prediction():
    gt = np.array([0, 1, 2, 2])
    assert miou(ConfusionMatrix(3).add(gt, gt)) == 1.0


def test_hand_example():
    cm = ConfusionMatrix(2).add(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert np.allclose(cm.iou(), [1 / 2, 2 / 3])
    assert miou(cm) == pytest.approx(7 / 12)


def test_all_ignore_is_error():
    cm = ConfusionMatrix(2).add(np.zeros(3, int), np.full(3, 255))
    with pytest.raises(ValueError):
        miou(cm)


def test_zero_union_class_excluded():
    cm = ConfusionMatrix(4).add(np.array([0, 1]), np.array([0, 1]))
    assert np.isnan(cm.iou()[2:]).all()
    assert miou(cm) == 1.0


def test_out_of_range_labels():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).add(np.array([0]), np.array([2]))
    with pytest.raises(ValueError):
        ConfusionMatrix(2).add(np.array([5]), np.array([1]))


@given(data=st.data())
def test_against_loop_oracle(data):
    gt = data.draw(labels)
    pred = data.draw(hnp.arrays(np.int64, gt.shape, elements=st.integers(0, 3)))
    gt = np.where(data.draw(hnp.arrays(bool, gt.shape)), 255, gt)
    assert np.array_equal(ConfusionMatrix(4).add(pred, gt).counts, confusion_loops(pred, gt, 4))


@given(data=st.data())
def test_relabel_equivariance_and_ignore_invariance(data):
    gt = data.draw(labels)
    pred = data.draw(hnp.arrays(np.int64, gt.shape, elements=st.integers(0, 3)))
    perm = np.array(data.draw(st.permutations(range(4))))
    a = miou(ConfusionMatrix(4).add(pred, gt))
    assert miou(ConfusionMatrix(4).add(perm[pred], perm[gt])) == pytest.approx(a)
    padded_gt = np.concatenate([gt, np.full(5, 255)])
    padded_pred = np.concatenate([pred, np.arange(5) % 4])
    assert miou(ConfusionMatrix(4).add(padded_pred, padded_gt)) == pytest.approx(a)


@given(data=st.data())
def test_accumulation_order_independent(data):
    chunks = [(data.draw(labels), None) for _ in range(3)]
    chunks = [(g, np.roll(g, 1)) for g, _ in chunks]
    fwd = ConfusionMatrix(4)
    for g, p in chunks:
        fwd.add(p, g)
    parts = [ConfusionMatrix(4).add(p, g) for g, p in reversed(chunks)]
    assert np.array_equal((parts[0] + parts[1] + parts[2]).counts, fwd.counts)


def test_abt_config_validation():
    with pytest.raises(ValueError):
        AbtConfig(k=0)
    with pytest.raises(ValueError):
        AbtConfig(k=1, average_pair=True)
    AbtConfig(k=1, average_pair=False)


@pytest.fixture(scope="module")
def tiny_val():
    return generate_split(SynthConfig(height=16, width=16, min_size=1, max_size=3, n_train=0, n_val=4), 1)


def test_stateless_independent_of_k(tiny_val):
    net = build_toynet(5, 8, 0.5, None, seed=2)
    vals = [m for _, m in abt_sweep(net, tiny_val, range(3, 8))]
    assert len(set(vals)) == 1


def test_full_masks_independent_of_k(tiny_val):
    net = build_toynet(5, 8, 0.5, 1.0, seed=2)
    vals = [m for _, m in abt_sweep(net, tiny_val, range(3, 8))]
    assert len(set(vals)) == 1


def test_average_pair_is_mean(tiny_val):
    net = build_toynet(5, 8, 0.5, 0.0, seed=2)
    a = abt_eval(net, tiny_val, AbtConfig(6, False))
    b = abt_eval(net, tiny_val, AbtConfig(5, False))
    assert abt_eval(net, tiny_val, AbtConfig(6, True)) == pytest.approx((a + b) / 2)


def test_sequence_too_short(tiny_val):
    with pytest.raises(ValueError):
        confusion_at(build_toynet(5, 8, 0.5, 0.0), tiny_val, 20)


def test_sweep_csv(tmp_path):
    write_sweep_csv([(3, 0.5), (4, 0.25)], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "k,miou\n3,0.5\n4,0.25\n"
