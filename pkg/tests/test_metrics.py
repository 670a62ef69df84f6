import numpy as np
import pytest

from aop3d.errors import ShapeMismatchError
from aop3d.metrics import (
    IpqWeights,
    compute_ipq,
    compute_pq,
    evaluate_ipq,
    match_instances,
)
from aop3d.volume import LabelVolume

from _oracles import brute_force_match


def cube_volume(shape=(8, 8, 8)):
    return np.zeros(shape, dtype=np.int64)


def test_identity_three_instances():
    gt = cube_volume()
    gt[0:2, 0:2, 0:2] = 1
    gt[4:6, 0:2, 0:2] = 2
    gt[0:2, 4:6, 4:6] = 3
    v = LabelVolume(gt)
    m = match_instances(v, v)
    assert m.tp == {1, 2, 3}
    assert not m.fp and not m.fn
    assert all(m.union_iou[g] == 1.0 for g in (1, 2, 3))
    r = compute_ipq(m)
    assert r.sq == r.rq == r.iq == r.ipq == 1.0


def test_split_into_halves():
    gt = cube_volume()
    gt[2:6, 2:6, 2:6] = 1
    pred = cube_volume()
    pred[2:4, 2:6, 2:6] = 1
    pred[4:6, 2:6, 2:6] = 2
    m = match_instances(LabelVolume(pred), LabelVolume(gt))
    assert m.tp == {1}
    assert m.groups[1] == [1, 2]
    assert m.union_iou[1] == 1.0
    r = compute_ipq(m)
    assert r.sq == 1.0 and r.rq == 1.0
    assert r.iq == pytest.approx(0.5, abs=1e-12)
    assert r.ipq == pytest.approx(0.5, abs=1e-12)


def test_split_into_thirds():
    gt = cube_volume((9, 6, 6))
    gt[0:9, 0:6, 0:6] = 1
    pred = cube_volume((9, 6, 6))
    pred[0:3] = 1
    pred[3:6] = 2
    pred[6:9] = 3
    r = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
    assert r.iq == pytest.approx(1.0 / 6.0, abs=1e-12)


def test_hallucination_rq():
    gt = cube_volume()
    gt[0:4, 0:4, 0:4] = 1
    pred = gt.copy()
    pred[5:7, 5:7, 5:7] = 2  # disjoint hallucination
    r = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
    assert r.sq == 1.0 and r.iq == 1.0
    assert r.rq == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert r.ipq == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_omission_rq_and_iq_clamp():
    gt = cube_volume()
    gt[0:3, 0:3, 0:3] = 1
    gt[5:8, 5:8, 5:8] = 2
    pred = cube_volume()
    pred[0:3, 0:3, 0:3] = 1
    r = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
    assert r.sq == 1.0
    assert r.rq == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert r.iq == 1.0  # raw 2/1 clamped
    assert r.ipq == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_shifted_cube_iou():
    gt = cube_volume()
    gt[0:4, 0:4, 0:4] = 1
    pred = cube_volume()
    pred[0:4, 0:4, 1:5] = 1
    m = match_instances(LabelVolume(pred), LabelVolume(gt))
    # hand count: inter 3*4*4=48, union 64+64-48=80
    assert m.union_iou[1] == pytest.approx(0.6, abs=1e-12)
    assert m.tp == {1}
    assert compute_pq(LabelVolume(pred), LabelVolume(gt)) == pytest.approx(0.6, abs=1e-12)


def test_pq_vs_ipq_at_split_threshold():
    # two halves each have IoU exactly 0.5 with the whole: PQ drops to 0,
    # IPQ keeps the detection and charges the split instead.
    gt = cube_volume()
    gt[2:6, 2:6, 2:6] = 1
    pred = cube_volume()
    pred[2:4, 2:6, 2:6] = 1
    pred[4:6, 2:6, 2:6] = 2
    pv, gv = LabelVolume(pred), LabelVolume(gt)
    assert compute_pq(pv, gv) == 0.0
    assert evaluate_ipq(pv, gv).ipq == pytest.approx(0.5, abs=1e-12)


def test_per_annotation_iq_mode():
    gt = cube_volume()
    gt[2:6, 2:6, 2:6] = 1
    pred = cube_volume()
    pred[2:4, 2:6, 2:6] = 1
    pred[4:6, 2:6, 2:6] = 2
    r = evaluate_ipq(LabelVolume(pred), LabelVolume(gt), iq_mode="per-annotation")
    assert r.iq == 1.0  # max(1, 2-1) = 1 under the literal reading
    pred3 = cube_volume((9, 6, 6))
    pred3[0:3] = 1
    pred3[3:6] = 2
    pred3[6:9] = 3
    gt3 = np.ones((9, 6, 6), dtype=np.int64)
    r3 = evaluate_ipq(LabelVolume(pred3), LabelVolume(gt3), iq_mode="per-annotation")
    assert r3.iq == pytest.approx(0.5, abs=1e-12)


def test_degenerate_cases():
    empty = LabelVolume(cube_volume((2, 2, 2)))
    one = cube_volume((2, 2, 2))
    one[0, 0, 0] = 1
    r = evaluate_ipq(empty, empty)
    assert (r.sq, r.rq, r.iq, r.ipq) == (1.0, 1.0, 1.0, 1.0)
    r = evaluate_ipq(LabelVolume(one), empty)
    assert (r.sq, r.iq, r.rq) == (1.0, 1.0, 0.0)
    r = evaluate_ipq(empty, LabelVolume(one))
    assert r.rq == 0.0 and r.ipq == 0.0


def test_shape_mismatch_raises():
    a = LabelVolume(cube_volume((2, 2, 2)))
    b = LabelVolume(cube_volume((3, 2, 2)))
    with pytest.raises(ShapeMismatchError):
        match_instances(a, b)


def random_labels(rng, shape=(10, 10, 10), n_blobs=5):
    out = np.zeros(shape, dtype=np.int64)
    for i in range(1, n_blobs + 1):
        c = rng.integers(1, np.array(shape) - 1)
        r = int(rng.integers(1, 3))
        lo = np.maximum(c - r, 0)
        hi = np.minimum(c + r, shape)
        out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = i
    return out


def test_match_vs_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        gt = random_labels(rng)
        pred = random_labels(rng)
        m = match_instances(LabelVolume(pred), LabelVolume(gt))
        tp, fp, fn = brute_force_match(pred, gt)
        assert set(m.tp) == tp
        assert set(m.fp) == fp
        assert set(m.fn) == fn


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    gt = random_labels(rng)
    pred = random_labels(rng)
    base = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
    perm = rng.permutation(np.arange(1, 10)).astype(np.int64)
    lut = np.zeros(10, dtype=np.int64)
    lut[1:] = perm[:9]
    permuted = lut[pred]
    r = evaluate_ipq(LabelVolume(permuted), LabelVolume(gt))
    for attr in ("sq", "rq", "iq", "ipq", "pq"):
        assert getattr(r, attr) == pytest.approx(getattr(base, attr), abs=1e-12)


def test_hallucination_monotonicity():
    rng = np.random.default_rng(9)
    for _ in range(10):
        gt = random_labels(rng)
        pred = random_labels(rng)
        base = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
        spot = np.argwhere((gt == 0) & (pred == 0))
        if spot.size == 0:
            continue
        z, y, x = spot[0]
        pred2 = pred.copy()
        pred2[z, y, x] = pred.max() + 1
        r = evaluate_ipq(LabelVolume(pred2), LabelVolume(gt))
        assert r.rq <= base.rq + 1e-12
        assert r.sq == pytest.approx(base.sq, abs=1e-12)


def test_scores_in_unit_interval():
    rng = np.random.default_rng(11)
    for _ in range(15):
        gt = random_labels(rng)
        pred = random_labels(rng)
        r = evaluate_ipq(LabelVolume(pred), LabelVolume(gt))
        for attr in ("sq", "rq", "iq", "ipq", "pq"):
            assert 0.0 <= getattr(r, attr) <= 1.0
        assert r.ipq == pytest.approx(r.sq * r.rq * r.iq, abs=1e-12)


def test_weights_scale_factors():
    gt = cube_volume()
    gt[0:4, 0:4, 0:4] = 1
    v = LabelVolume(gt)
    r = evaluate_ipq(v, v, k=IpqWeights(0.5, 1.0, 0.25))
    assert r.ipq == pytest.approx(0.5 * 1.0 * 0.25, abs=1e-12)


def test_injective_ipq_equals_pq():
    rng = np.random.default_rng(13)
    for _ in range(10):
        gt = random_labels(rng, n_blobs=4)
        # injective perturbation: per-instance erode/keep, never split/merge
        pred = gt.copy()
        for i in np.unique(gt[gt > 0]):
            if rng.random() < 0.4:
                vox = np.argwhere(gt == i)
                drop = vox[rng.random(len(vox)) < 0.2]
                pred[tuple(drop.T)] = 0
        pv, gv = LabelVolume(pred), LabelVolume(gt)
        r = evaluate_ipq(pv, gv)
        assert r.ipq == pytest.approx(compute_pq(pv, gv), abs=1e-12)
