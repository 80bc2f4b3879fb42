import math

import numpy as np
import pytest

from pointrgcn.codec import (
    BINNED, MEAN_DIMS, BinSpec, BoxCoder, TargetBatch, assign_roles, build_targets, decode, decode_batch,
    default_bin_specs, encode_targets, targets_to_vector, total_loss,
)
from pointrgcn.geom import Box7, canonicalize_box, iou_3d
from pointrgcn.nn.autograd import Tensor, backward, parameter

from oracles import numeric_grad, rel_err


def random_pair(rng, spread=1.0):
    prop = Box7(*rng.uniform(-20, 20, 3), *rng.uniform(1, 4, 3), rng.uniform(-math.pi, math.pi))
    local = Box7(
        rng.uniform(-1.45, 1.45) * spread, rng.uniform(-0.5, 0.5), rng.uniform(-1.45, 1.45) * spread,
        *rng.uniform(1, 4, 3), rng.uniform(-0.38, 0.38),
    )
    from pointrgcn.geom import decanonicalize_box

    return prop, decanonicalize_box(local, prop)


def perfect_vector(t, coder):
    onehot, regs = targets_to_vector(t, coder)
    vec = np.where(onehot > 0, 10.0, -10.0)
    lay = coder.layout
    for j, f in enumerate(BINNED):
        sl = lay[f + "_reg"]
        vec[sl] = regs[j]
    for j, f in enumerate(("y", "h", "w", "l"), start=3):
        vec[lay[f]] = regs[j]
    return vec


def test_bin_geometry():
    coder = BoxCoder()
    assert coder.bins == {"x": 6, "z": 6, "theta": 9}
    assert coder.reg_width == 46
    specs = default_bin_specs()
    assert (specs["h"].size, specs["w"].size, specs["l"].size) == (1.53, 1.63, 3.88)
    assert MEAN_DIMS == {"h": 1.53, "w": 1.63, "l": 3.88}
    lay = coder.layout
    assert lay["x_cls"] == slice(0, 6) and lay["x_reg"] == slice(6, 12)
    assert lay["theta_reg"] == slice(33, 42) and (lay["y"], lay["l"]) == (42, 45)
    with pytest.raises(ValueError, match="not a multiple"):
        BinSpec("x", 1.0, 0.3, "proposal").count
    # bin centres are symmetric about the reference
    np.testing.assert_allclose(specs["x"].center(0.0, np.arange(6)), [-1.25, -0.75, -0.25, 0.25, 0.75, 1.25])


@pytest.mark.parametrize("canonical", [True, False])
def test_roundtrip_random(canonical):
    rng = np.random.default_rng(1)
    coder = BoxCoder(canonical=canonical)
    for _ in range(300):
        if canonical:
            prop, gt = random_pair(rng)
        else:
            prop = Box7(*rng.uniform(-20, 20, 3), *rng.uniform(1, 4, 3), rng.uniform(-3, 3))
            gt = Box7(prop.x + rng.uniform(-1.45, 1.45), prop.y + rng.uniform(-.5, .5), prop.z + rng.uniform(-1.45, 1.45),
                      *rng.uniform(1, 4, 3), prop.theta + rng.uniform(-0.38, 0.38))
        t = encode_targets(prop, gt, coder)
        out = decode(prop, perfect_vector(t, coder), coder)
        np.testing.assert_allclose(out.to_array()[:6], gt.to_array()[:6], atol=1e-9)
        assert abs(math.remainder(out.theta - gt.theta, 2 * math.pi)) < 1e-9


def test_heading_flip_and_clamp():
    coder = BoxCoder()
    prop = Box7(0, 0, 10, 1.5, 1.6, 3.9, 0.0)
    # a gt facing backwards is encoded as the flipped (equivalent) box
    back = Box7(0.2, 0, 10, 1.5, 1.6, 3.9, math.pi - 0.1)
    t = encode_targets(prop, back, coder)
    out = decode(prop, perfect_vector(t, coder), coder)
    assert out.theta == pytest.approx(-0.1)
    assert iou_3d(out, back) == pytest.approx(1.0)
    # beyond the theta search range the target saturates at the edge
    far = Box7(0, 0, 10, 1.5, 1.6, 3.9, math.radians(40))
    t = encode_targets(prop, far, coder)
    assert t.bins["theta"] == 8
    assert decode(prop, perfect_vector(t, coder), coder).theta == pytest.approx(math.radians(22.5))
    # positions beyond the search range fall in the outermost bin
    off = Box7(3.0, 0, 10, 1.5, 1.6, 3.9, 0)
    assert encode_targets(prop, off, coder).bins["x"] == 5


def test_canonical_targets_are_rotation_invariant():
    coder = BoxCoder()
    prop = Box7(2, 0, 10, 1.5, 1.6, 3.9, 0.0)
    gt = Box7(2.5, 0.1, 10.3, 1.4, 1.7, 4.0, 0.1)
    base = encode_targets(prop, gt, coder)
    R = lambda b, a: Box7(b.x * math.cos(a) + b.z * math.sin(a), b.y, -b.x * math.sin(a) + b.z * math.cos(a), b.h, b.w, b.l, b.theta + a)
    rot = encode_targets(R(prop, 1.0), R(gt, 1.0), coder)
    assert rot.bins == base.bins
    for f in base.breg:
        assert rot.breg[f] == pytest.approx(base.breg[f], abs=1e-9)


def test_residual_feature_encoding():
    coder = BoxCoder()
    prop = Box7(0, 1.0, 10, 1.0, 1.0, 1.0, 0)
    gt = Box7(0, 1.3, 10, 1.53 * 1.1, 1.63, 3.88 * 0.5, 0)
    t = encode_targets(prop, gt, coder)
    assert t.breg["y"] == pytest.approx(0.3)
    assert t.breg["h"] == pytest.approx(0.1)
    assert t.breg["w"] == pytest.approx(0.0)
    assert t.breg["l"] == pytest.approx(-0.5)


def test_decode_checks_width_and_batch():
    coder = BoxCoder()
    prop = Box7(0, 0, 0, 1, 1, 1, 0)
    with pytest.raises(ValueError, match="width 10"):
        decode(prop, np.zeros(10), coder)
    out = decode_batch([prop, prop], np.zeros((2, 46)), coder)
    assert len(out) == 2
    # all-zero vector: first bin of each feature, anchor dims
    assert out[0].l == pytest.approx(3.88) and out[0].x == pytest.approx(-1.25)
    vec = np.zeros(46)
    vec[coder.layout["h"]] = -5
    assert decode(prop, vec, coder).h == pytest.approx(1e-3)


def test_assign_roles_thresholds():
    gt = Box7(0, 0, 0, 1, 1, 1, 0)
    def shifted(iou):
        # overlap fraction f along x of unit cubes has IoU f / (2 - f)
        f = 2 * iou / (1 + iou)
        return Box7(1 - f, 0, 0, 1, 1, 1, 0)
    props = [shifted(v) for v in (0.7, 0.6, 0.58, 0.55, 0.5, 0.45, 0.3)]
    r = assign_roles(props, [gt])
    np.testing.assert_allclose(r.iou, [0.7, 0.6, 0.58, 0.55, 0.5, 0.45, 0.3], atol=1e-9)
    assert list(r.cls[[0, 2, 4, 6]]) == [1, -1, -1, 0]
    assert r.cls[3] == -1
    assert list(r.reg_mask) == [True, True, True, True, False, False, False]
    empty = assign_roles(props, [])
    assert (empty.cls == 0).all() and not empty.reg_mask.any()
    assert assign_roles([], [gt]).cls.shape == (0,)


def _targets(rng, n=6):
    coder = BoxCoder()
    pairs = [random_pair(rng) for _ in range(n)]
    props = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    roles = assign_roles(props, gts)
    roles.cls = np.array([1, 0, -1, 1, 0, 1])[:n]
    roles.reg_mask = np.array([True, False, True, True, False, True])[:n]
    roles.gt_index = np.arange(n)
    return coder, build_targets(props, gts, roles, coder)


@pytest.mark.parametrize("bin_loss", ["bce", "softmax"])
def test_total_loss_gradients(bin_loss):
    rng = np.random.default_rng(3)
    coder, tb = _targets(rng)
    coder = BoxCoder(bin_loss=bin_loss)
    cls = rng.normal(size=6)
    reg = rng.normal(size=(6, 46))

    def f(c, r):
        return total_loss(c, r, tb, coder)[0]

    c, r = parameter(cls), parameter(reg)
    backward(f(c, r))
    for p, arr in ((c, cls), (r, reg)):
        num = numeric_grad(lambda: f(Tensor(cls), Tensor(reg)).item(), arr)
        assert rel_err(p.grad, num) < 1e-4


def test_total_loss_matches_hand_computation():
    rng = np.random.default_rng(4)
    coder, tb = _targets(rng)
    cls = rng.normal(size=6)
    reg = rng.normal(size=(6, 46))
    loss, comp = total_loss(Tensor(cls), Tensor(reg), tb, coder)

    def bce(z, t):
        return np.logaddexp(0, z) - z * t

    def sl1(d):
        return np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5)

    valid = tb.cls >= 0
    l_cls = bce(cls[valid], tb.cls[valid]).mean()
    lay = coder.layout
    R = np.flatnonzero(tb.reg_mask)
    l_bin = 0.0
    l_res = 0.0
    for i in R:
        for j, f in enumerate(BINNED):
            sl = lay[f + "_cls"]
            l_bin += bce(reg[i, sl], tb.onehot[i, sl]).mean()
            b = int(np.argmax(tb.onehot[i, sl]))
            l_res += sl1(reg[i, lay[f + "_reg"]][b] - tb.reg[i, j])
        for j, f in enumerate(("y", "h", "w", "l"), start=3):
            l_res += sl1(reg[i, lay[f]] - tb.reg[i, j])
    assert comp["cls"] == pytest.approx(l_cls, rel=1e-12)
    assert comp["bin"] == pytest.approx(l_bin / 6, rel=1e-12)
    assert comp["reg"] == pytest.approx(l_res / len(R), rel=1e-12)
    assert loss.item() == pytest.approx(l_cls + l_bin / 6 + l_res / len(R), rel=1e-12)


def test_total_loss_chunks_sum_to_whole():
    rng = np.random.default_rng(5)
    coder, tb = _targets(rng)
    cls = Tensor(rng.normal(size=6))
    reg = Tensor(rng.normal(size=(6, 46)))
    whole = total_loss(cls, reg, tb, coder)[0].item()
    norms = tb.normalizers()
    parts = 0.0
    for lo, hi in ((0, 2), (2, 6)):
        sub = TargetBatch(tb.cls[lo:hi], tb.reg_mask[lo:hi], tb.onehot[lo:hi], tb.reg[lo:hi])
        parts += total_loss(cls[lo:hi], reg[lo:hi], sub, coder, norms)[0].item()
    assert parts == pytest.approx(whole, rel=1e-12)


def test_total_loss_empty_sets():
    coder = BoxCoder()
    tb = TargetBatch.stack([], coder)
    loss, comp = total_loss(Tensor(np.zeros(0)), Tensor(np.zeros((0, 46))), tb, coder)
    assert comp == {"cls": 0.0, "bin": 0.0, "reg": 0.0, "total": 0.0}
