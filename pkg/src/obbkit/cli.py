"""Command-line entry point: ``obbkit <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input, 2 on file-system errors.
Every report goes to stdout as JSON with sorted keys.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .checks import fusion_gradient_report, loss_gradient_report
from .coding import DEFAULT_LEVELS, atss_assign, generate_anchor_points
from .dota import Annotation, parse_dota, read_dir, write_dota
from .evaluation import DEFAULT_BUDGETS, EvalConfig, GroundTruth, evaluate_dataset
from .geometry import OrientedBox, rotated_giou, rotated_iou
from .postproc import DEFAULT_PROPOSAL_NMS_THR, Detection, batched_nms, horizontal_nms, rotated_nms
from .scenes import SceneConfig, ablation_config, gen_scene_set, nms_ablation

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _box(vals) -> OrientedBox:
    return OrientedBox.from_array(vals)


def cmd_iou(args):
    a, b = _box(args.box1), _box(args.box2)
    _emit({"iou": rotated_iou(a, b), "giou": rotated_giou(a, b)})


def cmd_nms(args):
    anns = parse_dota(args.dets, with_score=True)
    names = sorted({a.name for a in anns})
    dets = [Detection(a.box, a.score, names.index(a.name)) for a in anns]
    if args.per_class:
        keep = batched_nms(dets, args.iou_thr, args.mode)
    else:
        keep = (rotated_nms if args.mode == "rotated" else horizontal_nms)(dets, args.iou_thr)
    write_dota([anns[i] for i in keep], args.out)
    _emit({"mode": args.mode, "iou_thr": args.iou_thr, "per_class": args.per_class,
           "input": len(dets), "kept": len(keep), "kept_indices": keep})


def cmd_assign(args):
    anns = parse_dota(args.gts)
    grids = generate_anchor_points(args.width, args.height, args.levels)
    res = atss_assign(grids, [a.box for a in anns], args.k)
    per_level, off = {}, 0
    for g in grids:
        labels = res.labels[off:off + len(g)]
        per_level[f"P{g.level_index}"] = {"stride": g.stride, "anchors": len(g),
                                          "positives": int((labels >= 0).sum())}
        off += len(g)
    pos = res.positive_indices
    _emit({
        "num_gts": len(anns),
        "k": args.k,
        "total_anchors": int(res.labels.size),
        "total_positives": res.num_positive,
        "levels": per_level,
        "positives_per_gt": res.positives_per_gt(len(anns)),
        "mean_positive_iou": float(res.ious[pos].mean()) if pos.size else 0.0,
    })


def cmd_losscheck(args):
    report = loss_gradient_report(args.n, args.seed, args.step)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_INVALID


def cmd_fusioncheck(args):
    report = fusion_gradient_report(args.shapes, args.seed, args.step)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_INVALID


def cmd_gen(args):
    cfg = SceneConfig.from_json(args.config).to_dict() if args.config else SceneConfig().to_dict()
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = SceneConfig.from_dict(cfg)
    scenes = gen_scene_set(config)
    out = Path(args.out)
    names = config.class_names
    n_det = n_gt = n_prop = 0
    for i, im in enumerate(scenes.images):
        stem = f"img_{i:04d}.txt"
        write_dota([Annotation(g.box, names[g.label]) for g in im.gts], out / "gts" / stem)
        write_dota([Annotation(d.box, names[d.label], score=d.score) for d in im.detections],
                   out / "dets" / stem)
        write_dota([Annotation(p.box, "proposal", score=p.score) for p in im.proposals],
                   out / "proposals" / stem)
        n_gt += len(im.gts)
        n_det += len(im.detections)
        n_prop += len(im.proposals)
    (out / "classes.txt").write_text("".join(n + "\n" for n in names))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"out": str(out), "images": len(scenes.images), "ground_truths": n_gt,
           "detections": n_det, "proposals": n_prop, "seed": config.seed})


def cmd_eval(args):
    gts = read_dir(args.gts)
    dets = read_dir(args.dets, with_score=True)
    if args.classes:
        names = [ln.strip() for ln in Path(args.classes).read_text().splitlines() if ln.strip()]
    else:
        names = sorted({a.name for v in list(gts.values()) + list(dets.values()) for a in v})
    index = {n: i for i, n in enumerate(names)}
    stems = sorted(set(gts) | set(dets))
    per_gts, per_dets = [], []
    for s in stems:
        for a in gts.get(s, []) + dets.get(s, []):
            if a.name not in index:
                raise ValueError(f"class {a.name!r} in {s} is not in the class list")
        per_gts.append([GroundTruth(a.box, index[a.name], bool(a.difficult)) for a in gts.get(s, [])])
        per_dets.append([Detection(a.box, a.score, index[a.name]) for a in dets.get(s, [])])
    cfg = EvalConfig(names, metric=args.metric, iou_thr=args.iou_thr, ar_budgets=args.budgets,
                     confusion_score_thr=args.score_thr)
    report = evaluate_dataset(per_dets, per_gts, cfg)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.plot_dir:
        from .plotting import plot_confusion, plot_pr_curves
        plot_pr_curves(report.curves, Path(args.plot_dir) / "pr_curves.png",
                       title=f"Precision-recall ({args.metric}, IoU {args.iou_thr})")
        plot_confusion(report.confusion, names, Path(args.plot_dir) / "confusion.png")
    sys.stdout.write(text)


def cmd_ablate_nms(args):
    if args.config:
        d = SceneConfig.from_json(args.config).to_dict()
    else:
        d = ablation_config().to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    config = SceneConfig.from_dict(d)
    table = nms_ablation(config, args.budgets, args.iou_thr)
    flat = {mode: {str(b): {k: v for k, v in row.items() if k != "recall"} for b, row in rows.items()}
            for mode, rows in table.items()}
    better = {str(b): {m: table["without_nms"][b][m] > table["with_nms"][b][m] for m in ("R75", "AR")}
              for b in args.budgets}
    result = {"seed": config.seed, "score_model": config.score_model, "iou_thr": args.iou_thr,
              "table": flat, "without_nms_better": better}
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "nms_ablation.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["proposals", "nms", "R50", "R75", "R85", "AR"])
            for b in args.budgets:
                for mode in ("with_nms", "without_nms"):
                    row = table[mode][b]
                    wr.writerow([b, "yes" if mode == "with_nms" else "no",
                                 *(f"{row[m]:.4f}" for m in ("R50", "R75", "R85", "AR"))])
        (out / "nms_ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        from .plotting import plot_recall_ablation
        plot_recall_ablation(table, out / "nms_ablation.png")
    _emit(result)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="obbkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"obbkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("iou", help="rotated IoU and GIoU of two boxes")
    s.add_argument("--box1", nargs=5, type=float, required=True, metavar=("CX", "CY", "W", "H", "THETA"))
    s.add_argument("--box2", nargs=5, type=float, required=True, metavar=("CX", "CY", "W", "H", "THETA"))
    s.set_defaults(func=cmd_iou)

    s = sub.add_parser("nms", help="suppress a DOTA detection file")
    s.add_argument("dets")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("rotated", "horizontal"), default="rotated")
    s.add_argument("--iou-thr", type=float, default=0.5)
    s.add_argument("--per-class", action="store_true")
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("assign", help="ATSS assignment statistics for a DOTA gt file")
    s.add_argument("gts")
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--levels", type=int, nargs="+", default=list(DEFAULT_LEVELS))
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("losscheck", help="gradient check of focal loss and ARL")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-6)
    s.set_defaults(func=cmd_losscheck)

    s = sub.add_parser("fusioncheck", help="gradient check of the fusion and attention blocks")
    s.add_argument("--shapes", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=1e-6)
    s.set_defaults(func=cmd_fusioncheck)

    s = sub.add_parser("gen", help="generate a synthetic scene set as DOTA files")
    s.add_argument("config", nargs="?", help="SceneConfig JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("eval", help="evaluate a detection directory against ground truths")
    s.add_argument("--dets", required=True)
    s.add_argument("--gts", required=True)
    s.add_argument("--metric", choices=("voc07", "voc12"), default="voc12")
    s.add_argument("--iou-thr", type=float, default=0.5)
    s.add_argument("--score-thr", type=float, default=0.05, help="confusion-matrix score filter")
    s.add_argument("--budgets", type=int, nargs="+", default=list(DEFAULT_BUDGETS))
    s.add_argument("--classes", help="file with one class name per line")
    s.add_argument("--out")
    s.add_argument("--plot-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-nms", help="proposal recall with and without NMS")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--budgets", type=int, nargs="+", default=list(DEFAULT_BUDGETS))
    s.add_argument("--iou-thr", type=float, default=DEFAULT_PROPOSAL_NMS_THR)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_ablate_nms)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"obbkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"obbkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
