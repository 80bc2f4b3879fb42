import csv
import math
from pathlib import Path

import numpy as np
import pytest

from pointrgcn import kitti_io, pipeline
from pointrgcn.cli import main
from pointrgcn.config import ConfigError, RunConfig
from pointrgcn.geom import Box7, iou_bev_matrix
from pointrgcn.plot import BevView, polygon_points, render_bev
from pointrgcn.rng import derive_seed
from pointrgcn.synth import gen_frame

TINY = """rgcn_layers = 2
rgcn_filters = 8
rgcn_k = 4
rgcn_global = 16
rgcn_points = 32
c_rpn = 4
head_hidden = 16
cgcn_layers = 1
cgcn_filters = 8
cgcn_k = 2
cgcn_global = 16
epochs = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture
def dataset(tmp_path, tiny_cfg):
    root = tmp_path / "data"
    assert main(["synth", "--config", str(tiny_cfg), "--out-dir", str(root), "--frames", "2"]) == 0
    return root


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_zero_frames_makes_empty_layout(tmp_path, tiny_cfg):
    root = tmp_path / "empty"
    assert main(["synth", "--config", str(tiny_cfg), "--out-dir", str(root), "--frames", "0"]) == 0
    for sub in pipeline.SUBDIRS:
        assert (root / sub).is_dir() and not any((root / sub).iterdir())
    assert pipeline.load_dataset(root) == []


def test_synth_is_byte_identical_on_rerun(tmp_path, tiny_cfg, dataset):
    again = tmp_path / "again"
    main(["synth", "--config", str(tiny_cfg), "--out-dir", str(again), "--frames", "2"])
    a, b = _files(dataset), _files(again)
    assert a.keys() == b.keys() and len(a) == 10
    assert all(a[k] == b[k] for k in a)


def test_synthetic_frames_roundtrip_through_disk(dataset, tiny_cfg):
    cfg = RunConfig.load(tiny_cfg)
    mem = gen_frame(cfg.scene_spec(derive_seed(cfg.seed, 1)), "000001", cfg.c_rpn)
    disk = pipeline.load_frame(dataset, "000001")
    for g, h in zip(mem.gts, disk.gts):
        np.testing.assert_allclose(h.to_array(), g.to_array(), atol=1e-6)
    for p, q in zip(mem.proposals, disk.proposals):
        np.testing.assert_allclose(q.to_array(), p.to_array(), atol=1e-6)
    # the scan passes through float32 LiDAR storage
    np.testing.assert_allclose(disk.cloud.coords, mem.cloud.coords, atol=1e-4)
    np.testing.assert_allclose(disk.rpn_feats, mem.rpn_feats, atol=1e-6)


def test_load_frame_rejects_mismatched_features(dataset):
    blob = kitti_io.serialize_feature_blob(np.zeros((3, 4)))
    (dataset / "rpn_features" / "000000.bin").write_bytes(blob)
    with pytest.raises(kitti_io.MalformedInputError, match="3 rows"):
        pipeline.load_frame(dataset, "000000")
    with pytest.raises(FileNotFoundError, match="velodyne"):
        pipeline.frame_ids(dataset / "nope")


def test_train_refine_eval_plot(tmp_path, tiny_cfg, dataset, capsys):
    model = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--out-model", str(model)]) == 0
    rows = list(csv.DictReader(open(model.with_suffix(".loss.csv"))))
    assert len(rows) == 1 and all(math.isfinite(float(rows[0][k])) for k in ("loss", "cls", "bin", "reg"))

    out = tmp_path / "dets"
    assert main(["refine", "--model", str(model), "--data", str(dataset), "--out", str(out), "--score-threshold", "0"]) == 0
    files = sorted(out.glob("*.txt"))
    assert [f.stem for f in files] == ["000000", "000001"]
    boxes = []
    for f in files:
        objs = kitti_io.read_labels(f)
        frame_boxes = [o.box for o in objs]
        assert all(-math.pi < b.theta <= math.pi for b in frame_boxes)
        if len(frame_boxes) > 1:
            m = iou_bev_matrix(frame_boxes, frame_boxes)
            np.fill_diagonal(m, 0)
            assert m.max() < 0.1
        boxes += frame_boxes
    assert boxes

    report = tmp_path / "ap.csv"
    gt_dir = dataset / "label_2"
    assert main(["eval", "--dets", str(gt_dir), "--gts", str(gt_dir), "--out", str(report)]) == 0
    assert "100.00" in capsys.readouterr().out
    vals = [float(r["ap"]) for r in csv.DictReader(open(report))]
    assert vals == [100.0, 100.0, 100.0]

    svg = tmp_path / "f.svg"
    args = ["plot", "--frame", "000000", "--data", str(dataset), "--dets", str(out), "--out", str(svg)]
    assert main(args) == 0
    first = svg.read_bytes()
    main(args)
    assert svg.read_bytes() == first


def test_cli_errors_are_reported(tmp_path, tiny_cfg, dataset, capsys):
    gt_dir = dataset / "label_2"
    assert main(["eval", "--dets", str(gt_dir), "--gts", str(tmp_path / "missing")]) == 1
    assert "pointrgcn eval: error:" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("rgcn_layers = 2\nwidth = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out-model", str(tmp_path / "x")]) == 1
    assert "line 2: unknown config key 'width'" in capsys.readouterr().err
    model = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--out-model", str(model), "--rgcn-only"])
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("rgcn_filters = 8", "rgcn_filters = 12"))
    assert main(["refine", "--model", str(model), "--data", str(dataset), "--out", str(tmp_path / "o"), "--config", str(other)]) == 1
    assert "checkpoint version 1" in capsys.readouterr().err
    (dataset / "label_2" / "000000.txt").write_text("Car 0 0\n")
    assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--out-model", str(model)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_rgcn_only_checkpoint_has_no_context_net(tmp_path, tiny_cfg, dataset):
    model = tmp_path / "r.ckpt"
    main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--out-model", str(model), "--rgcn-only"])
    m, cfg = pipeline.load_model(model)
    assert not cfg.use_cgcn and m.cgcn is None


def test_refine_zero_proposals_and_empty_crops(tmp_path, tiny_cfg, dataset):
    cfg = RunConfig.load(tiny_cfg)
    model = pipeline.build_model(cfg)
    (dataset / "proposals" / "000000.txt").write_text("")
    frame = pipeline.load_frame(dataset, "000000")
    assert pipeline.refine_frame(model, frame, cfg) == []
    # a proposal far from every point is scored 0 and never emitted
    frame = pipeline.load_frame(dataset, "000001")
    frame.proposals.append(Box7(200, 0, 200, 1.5, 1.6, 3.9, 0))
    frame.proposal_scores.append(1.0)
    dets = pipeline.refine_frame(model, frame, cfg, nms_enabled=False, threshold=-1)
    assert len(frame.proposals) - 1 not in [d.proposal_index for d in dets]
    ckpt = tmp_path / "m.ckpt"
    pipeline.save_model(ckpt, model, cfg)
    out = tmp_path / "dets"
    assert main(["refine", "--model", str(ckpt), "--data", str(dataset), "--out", str(out)]) == 0
    assert (out / "000000.txt").read_text() == ""


def test_dataset_config_mismatch(dataset, tiny_cfg):
    cfg = RunConfig.load(tiny_cfg, c_rpn=6)
    with pytest.raises(ConfigError, match="c_rpn"):
        pipeline.train(cfg, pipeline.load_dataset(dataset))


def test_plot_geometry_and_empty_frame():
    view = BevView()
    box = Box7(3.0, 0.5, 20.0, 1.5, 1.6, 4.0, 0.6)
    svg = render_bev(None, [box], [], view)
    (poly,) = polygon_points(svg, "gt")
    # hand-built corners: length along (cos t, -sin t), width along (sin t, cos t) in (x, z)
    c, s = math.cos(box.theta), math.sin(box.theta)
    expect = []
    for a in (-0.5, 0.5):
        for b in (-0.5, 0.5):
            x = box.x + a * box.l * c + b * box.w * s
            z = box.z - a * box.l * s + b * box.w * c
            expect.append((30 + (x + 40) * 10, 30 + (70 - z) * 10))
    got = sorted(map(tuple, poly.round(2)))
    np.testing.assert_allclose(got, sorted(expect), atol=0.006)
    empty = render_bev(None, [], [], view)
    assert empty.startswith("<svg") and empty.rstrip().endswith("</svg>")
    assert '<g id="axes"' in empty and polygon_points(empty, "detections") == []
    assert f'width="{view.size[0]}"' in empty and view.size == (860, 760)
