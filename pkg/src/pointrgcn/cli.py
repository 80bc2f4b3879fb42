"""``pointrgcn`` command line: synth, train, refine, eval, plot."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import kitti_io, pipeline
from .config import ConfigError, RunConfig
from .evaluation import evaluate
from .synth import PlacementError


def _config(path, **overrides) -> RunConfig:
    return RunConfig.load(path, **{k: v for k, v in overrides.items() if v is not None})


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    ids = pipeline.synthesize_dataset(args.out_dir, cfg, args.frames)
    print(f"wrote {len(ids)} frames to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config, epochs=args.epochs)
    if args.rgcn_only:
        cfg = cfg.replace(use_cgcn=False)
    frames = pipeline.load_dataset(args.data)
    out = Path(args.out_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
    with open(log_path, "w", newline="") as fh:
        model, hist = pipeline.train(cfg, frames, loss_log=fh)
    pipeline.save_model(out, model, cfg)
    final = hist[-1]["total"] if hist else float("nan")
    print(f"trained {len(hist)} epochs, final loss {final:.5f}; model {out}, loss log {log_path}")
    return 0


def cmd_refine(args) -> int:
    cfg = None
    if args.config:
        cfg = _config(args.config)
    model, cfg = pipeline.load_model(args.model, cfg)
    overrides = {"score_threshold": args.score_threshold, "nms_threshold": args.nms_threshold}
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for fid in pipeline.frame_ids(args.data):
        frame = pipeline.load_frame(args.data, fid)
        dets = pipeline.refine_frame(model, frame, cfg)
        (out / f"{fid}.txt").write_text(kitti_io.write_detections(pipeline.detections_to_labels(dets)))
        total += len(dets)
    print(f"wrote {total} detections to {out}")
    return 0


def _label_dir(path: Path) -> dict[str, list]:
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    files = sorted(path.glob("*.txt"))
    return {f.stem: kitti_io.read_labels(f) for f in files}


def cmd_eval(args) -> int:
    gts = _label_dir(Path(args.gts))
    dets = _label_dir(Path(args.dets))
    ids = sorted(gts)
    report = evaluate(
        [dets.get(i, []) for i in ids],
        [gts[i] for i in ids],
        metrics=(args.metric,),
        recall_points=(args.recall,),
        iou_threshold=args.iou,
    )
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv())
    return 0


def cmd_plot(args) -> int:
    from .plot import render_bev

    points = None
    gts = []
    if args.data:
        frame = pipeline.load_frame(args.data, args.frame)
        points, gts = frame.cloud.coords, frame.gts
    if args.gts:
        gts = [o.box for o in kitti_io.read_labels(Path(args.gts) / f"{args.frame}.txt") if o.class_name == "Car"]
    dets = []
    if args.dets:
        dets = [o.box for o in kitti_io.read_labels(Path(args.dets) / f"{args.frame}.txt")]
    Path(args.out).write_text(render_bev(points, gts, dets, title=f"frame {args.frame}"))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointrgcn", description="Graph-convolutional 3D box refinement")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic KITTI-layout dataset")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--frames", type=int, default=20)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train refinement networks")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out-model", required=True)
    t.add_argument("--rgcn-only", action="store_true", help="drop the context network")
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss-log")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine proposals into KITTI detections")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--score-threshold", type=float)
    r.add_argument("--nms-threshold", type=float)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="KITTI-style AP")
    e.add_argument("--dets", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--metric", choices=("3d", "bev"), default="3d")
    e.add_argument("--recall", type=int, choices=(11, 40), default=40)
    e.add_argument("--iou", type=float, default=0.7)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("plot", help="BEV SVG of one frame")
    g.add_argument("--frame", required=True)
    g.add_argument("--data")
    g.add_argument("--dets")
    g.add_argument("--gts")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, kitti_io.MalformedInputError, OSError, ValueError, PlacementError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pointrgcn {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
