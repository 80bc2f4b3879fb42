import math

import numpy as np
import pytest

from pointrgcn.cgcn import Cgcn, CgcnConfig, ModelConfig, PointRGCN
from pointrgcn.codec import BoxCoder, assign_roles, build_targets, decode, total_loss
from pointrgcn.geom import Box7, PointCloud, box_corners, decanonicalize_box
from pointrgcn.nn.autograd import DimensionError, Tensor, backward, no_grad
from pointrgcn.rgcn import Heads, Rgcn, RgcnConfig, prepare_proposal_input
from pointrgcn.rng import SplitMix64
from pointrgcn.synth import sample_box_surface

from oracles import numeric_grad, rel_err

BOX = Box7(2.0, 0.5, 12.0, 1.5, 1.6, 3.9, 0.4)


def _cloud(n, seed=0):
    pts = sample_box_surface(BOX, n, SplitMix64(seed))
    return PointCloud(pts, np.ones((n, 1)))


def test_sampling_contract():
    cfg = RgcnConfig(num_points=512)
    inp = prepare_proposal_input(_cloud(2000), None, BOX, cfg, 1)
    assert inp.coords.shape == (512, 3) and not inp.empty
    assert len(set(inp.source_idx.tolist())) == 512
    small = prepare_proposal_input(_cloud(10), None, BOX, cfg, 1)
    assert small.coords.shape == (512, 3)
    assert set(small.source_idx.tolist()) <= set(range(10))
    far = Box7(50, 0, 50, 1, 1, 1, 0)
    empty = prepare_proposal_input(_cloud(100), np.ones((100, 4)), far, cfg, 1)
    assert empty.empty and not empty.coords.any() and empty.rpn.shape == (512, 4)


def test_canonical_corners_within_margin():
    corners = box_corners(BOX)
    cloud = PointCloud(corners, np.zeros((8, 1)))
    cfg = RgcnConfig(num_points=8, margin=1.0)
    inp = prepare_proposal_input(cloud, None, BOX, cfg, 0)
    half = np.array([BOX.l, BOX.h, BOX.w]) / 2  # canonical axes: x along the length, y down
    assert (np.abs(inp.coords) <= half + cfg.margin + 1e-9).all()


def test_default_widths():
    assert RgcnConfig().out_width == 5 * 64 + 1024 == 1344
    assert CgcnConfig().out_width == 3 * 64 + 1024 == 1216
    small = RgcnConfig(n_layers=2, filters=8, k=4, c_global=16, c_rpn=4, num_points=20, head_hidden=8)
    model = Rgcn(small, 0)
    rng = np.random.default_rng(0)
    out = model(rng.normal(size=(3, 20, 3)), rng.normal(size=(3, 20, 4)))
    assert out.shape == (3, 2 * 8 + 16)
    with pytest.raises(DimensionError, match="c_rpn = 4"):
        model(rng.normal(size=(3, 20, 3)), rng.normal(size=(3, 20, 5)))


def test_rgcn_is_permutation_invariant():
    cfg = RgcnConfig(n_layers=3, filters=8, k=4, c_global=16, c_rpn=4, num_points=30)
    model = Rgcn(cfg, 1)
    rng = np.random.default_rng(1)
    x, r = rng.normal(size=(30, 3)), rng.normal(size=(30, 4))
    perm = rng.permutation(30)
    a = model(x, r).data
    b = model(x[perm], r[perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_heads_give_bin0_box():
    heads = Heads(10, 6, 46, 0)
    for p in heads.parameters().values():
        p.data[...] = 0
    out = heads(Tensor(np.random.default_rng(2).normal(size=(2, 10))))
    assert out.cls.shape == (2,) and out.reg.shape == (2, 46)
    assert not out.cls.data.any() and not out.reg.data.any()
    coder = BoxCoder()
    prop = Box7(0, 0, 10, 1, 1, 1, 0)
    box = decode(prop, out.reg.data[0], coder)
    assert (box.x, box.z) == pytest.approx((-1.25, 8.75))
    assert box.theta == pytest.approx(-math.radians(20))
    assert (box.h, box.w, box.l) == pytest.approx((1.53, 1.63, 3.88))
    with pytest.raises(DimensionError):
        heads(Tensor(np.zeros((1, 9))))


def _miniature_targets(rng, coder, n=4):
    props, gts = [], []
    for _ in range(n):
        p = Box7(*rng.uniform(-5, 5, 3), *rng.uniform(1, 4, 3), rng.uniform(-3, 3))
        local = Box7(rng.uniform(-0.4, 0.4), rng.uniform(-.2, .2), rng.uniform(-0.4, 0.4), p.h, p.w, p.l, rng.uniform(-.2, .2))
        props.append(p)
        gts.append(decanonicalize_box(local, p))
    roles = assign_roles(props, gts)
    roles.cls = np.array([1, 0, 1, 1])[:n]
    roles.reg_mask = np.array([True, False, True, True])[:n]
    roles.gt_index = np.arange(n)
    return build_targets(props, gts, roles, coder)


def test_rgcn_heads_miniature_gradients():
    # 8 points, 2 layers, F = 8, through both heads into the total loss
    cfg = RgcnConfig(n_layers=2, filters=8, k=3, c_global=6, c_rpn=4, num_points=8, head_hidden=5)
    rng = np.random.default_rng(3)
    model = Rgcn(cfg, 4)
    heads = Heads(cfg.out_width, cfg.head_hidden, 46, 5)
    coder = BoxCoder()
    tb = _miniature_targets(rng, coder)
    coords, rpn = rng.normal(size=(4, 8, 3)), rng.normal(size=(4, 8, 4))

    def loss():
        out = heads(model(coords, rpn))
        return total_loss(out.cls, out.reg, tb, coder)[0]

    params = {**{"r." + k: v for k, v in model.parameters().items()}, **{"h." + k: v for k, v in heads.parameters().items()}}
    for p in params.values():
        p.grad = None
    backward(loss())
    for name, p in params.items():
        g = p.grad.copy()
        with no_grad():
            num = numeric_grad(lambda: loss().item(), p.data)
        assert rel_err(g, num) < 1e-4, name


def test_cgcn_single_node_is_mlp_chain():
    cfg = CgcnConfig(n_layers=2, filters=4, k=3, c_global=5)
    net = Cgcn(7, cfg, 0)
    h = np.random.default_rng(4).normal(size=(1, 7))
    out = net(Tensor(h)).data
    x = h @ net.stack.input_proj.weight.data
    outs = []
    for layer in net.stack.layers:
        lin = layer.mlp.layers[0]
        x = x + np.maximum(np.concatenate([x, np.zeros_like(x)], -1) @ lin.weight.data + lin.bias.data, 0)
        outs.append(x)
    local = np.concatenate(outs, -1)
    expect = np.concatenate([local, local @ net.glob.proj.weight.data + net.glob.proj.bias.data], -1)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_cgcn_is_permutation_equivariant():
    cfg = CgcnConfig(n_layers=3, filters=6, k=4, c_global=8)
    net = Cgcn(10, cfg, 1)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(12, 10))
    perm = rng.permutation(12)
    a = net(Tensor(x)).data
    b = net(Tensor(x[perm])).data
    assert a.shape == (12, cfg.out_width)
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def _tiny_model(**kw):
    rc = RgcnConfig(n_layers=2, filters=6, k=3, c_global=8, c_rpn=3, num_points=16, head_hidden=6)
    kw.setdefault("cgcn", CgcnConfig(n_layers=2, filters=6, k=3, c_global=8, head_hidden=6))
    return PointRGCN(ModelConfig(rgcn=rc, **kw), 0), rc


def _inputs(rc, n, seed=0):
    cloud = _cloud(300, seed)
    rpn = np.random.default_rng(seed).normal(size=(300, rc.c_rpn))
    return [prepare_proposal_input(cloud, rpn, BOX, rc, i) for i in range(n)]


def test_two_stage_model_outputs():
    model, rc = _tiny_model()
    inputs = _inputs(rc, 5)
    out = model(inputs, frame_sizes=[2, 3])
    assert len(out.heads) == 2
    assert out.final.reg.shape == (5, 46) and out.final.cls.shape == (5,)
    # frames are independent: the second frame's context ignores the first frame
    alone = model(inputs[2:], frame_sizes=[3])
    np.testing.assert_allclose(alone.final.reg.data, out.final.reg.data[2:], atol=1e-12)
    single, _ = _tiny_model(use_cgcn=False)
    assert len(single(inputs).heads) == 1 and single.cgcn is None
    pn, _ = _tiny_model(cgcn_input="pointnet", pointnet_width=10)
    assert pn.rgcn is None and len(pn(inputs).heads) == 1
    glob, _ = _tiny_model(cgcn=CgcnConfig(n_layers=1, filters=6, k=3, c_global=8, rpn_global=True))
    assert glob(inputs).final.reg.shape == (5, 46)
    with pytest.raises(ValueError, match="cgcn_input"):
        _tiny_model(cgcn_input="voxels")
