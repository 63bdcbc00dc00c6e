"""Batch command-line interface.

Subcommands: ``fuse`` (instance + semantic logits -> panoptic PNG), ``eval``
(directory pairs -> PQ/SQ/RQ/mIoU report), ``loss`` (loss terms from tensor
and pair files), ``params`` (layer description -> parameter counts),
``forward`` (encoder features + weight bundle -> class scores), ``fixture``
(seeded synthetic inputs). Exit codes: 0 success, 1 input error, 2 invariant
violation. All commands are deterministic: identical inputs and flags produce
byte-identical artifacts regardless of ``--jobs``; reports differ only in
their timing lines.

When ``--classes`` is omitted, commands look for ``cityscapes.classes`` in
``$PANOPTIKIT_CONFIG_DIR`` before falling back to the bundled registry; the
same applies to the bundled layer description for ``params``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .blocks import count_params, parse_layer_file, standard_equivalent_total
from .errors import DataError, FormatError, InvariantError, ToolkitError
from .fixtures import generate_scene
from .fusion import (
    FUSION_STRATEGIES,
    assemble_baseline,
    assemble_panoptic,
    fuse_adaptive,
    fuse_alternative,
)
from .instances import (
    FusionConfig,
    build_mlb,
    filter_and_sort,
    paste_mask_logits,
    read_instance_manifest,
    suppress_overlaps,
    write_instance_manifest,
)
from .losses import (
    BoxDelta,
    classification_loss,
    mask_loss,
    objectness_loss,
    regression_loss,
    semantic_loss,
    total_loss,
)
from .metrics import compute_miou, compute_pq, match_segments
from .panio import (
    ClassConfig,
    default_class_config,
    load_class_config,
    manifest_path_for,
    read_panoptic_png,
    save_class_config,
    small_class_config,
    write_panoptic_png,
)
from .semantic import (
    SemanticLogits,
    generate_encoder_features,
    load_weight_bundle,
    make_pipeline_weights,
    read_encoder_features,
    save_weight_bundle,
    semantic_pipeline_forward,
    write_encoder_features,
)
from .tensor import Tensor, read_ptsr, write_ptsr

CONFIG_DIR_ENV = "PANOPTIKIT_CONFIG_DIR"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; bad usage is an input error here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _Stopwatch:
    def __init__(self):
        self._last = time.perf_counter()
        self.stages: list[tuple[str, float]] = []

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.stages.append((name, (now - self._last) * 1000.0))
        self._last = now


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _print_report(
    command: str,
    config: dict,
    watch: _Stopwatch,
    outputs: list,
    warning_msgs: list[str],
) -> None:
    print(f"command {command}")
    for key, value in config.items():
        print(f"config {key}={_fmt(value)}")
    for name, ms in watch.stages:
        print(f"timing_ms {name}={ms:.6f}")
    for path in outputs:
        print(f"output {path}")
    for msg in warning_msgs:
        print(f"warning {msg}")


def _verbose(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


def _config_dir_file(name: str) -> Path | None:
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        candidate = Path(base) / name
        if candidate.exists():
            return candidate
    return None


def _resolve_classes(args) -> ClassConfig:
    if getattr(args, "classes", None):
        return load_class_config(args.classes)
    override = _config_dir_file("cityscapes.classes")
    if override is not None:
        return load_class_config(override)
    return default_class_config()


def _read_semantic(path, classes: ClassConfig) -> SemanticLogits:
    scores = read_ptsr(path)
    if scores.dims[0] != 1:
        raise DataError(f"semantic tensor must have batch 1, got dims {scores.dims}")
    if scores.dims[1] != len(classes.classes):
        raise DataError(
            f"semantic tensor has {scores.dims[1]} channels but the class "
            f"registry defines {len(classes.classes)} classes"
        )
    return SemanticLogits(scores, classes.class_ids)


# ---------------------------------------------------------------------------
# fuse


def cmd_fuse(args) -> int:
    watch = _Stopwatch()
    classes = _resolve_classes(args)
    semantic = _read_semantic(args.semantic, classes)
    instances = read_instance_manifest(args.instances)
    cfg = FusionConfig(args.ct, args.ot, args.min_stuff_area)
    _, _, h, w = semantic.scores.dims
    watch.lap("load")

    with warnings.catch_warnings(record=True) as captured:
        warnings.simplefilter("always")
        kept = filter_and_sort(instances, cfg)
        watch.lap("filter")
        pasted = [(inst, paste_mask_logits(inst, h, w)) for inst in kept]
        watch.lap("paste")
        surviving = suppress_overlaps(pasted, cfg)
        watch.lap("suppress")
        _verbose(args, f"{len(instances)} instances -> {len(surviving)} after suppression")

        if args.strategy == "baseline":
            pmap = assemble_baseline(surviving, semantic, classes, cfg)
            watch.lap("assemble")
        else:
            fused = []
            for inst, ml_a in surviving:
                ml_b = build_mlb(semantic, inst)
                if args.strategy == "adaptive":
                    fused.append((inst.class_id, fuse_adaptive(ml_a, ml_b)))
                else:
                    fused.append(
                        (inst.class_id, fuse_alternative(ml_a, ml_b, args.strategy))
                    )
            watch.lap("fuse")
            pmap = assemble_panoptic(fused, semantic, classes, cfg)
            watch.lap("assemble")

        outputs = write_panoptic_png(pmap, classes, args.out)
        watch.lap("write")

    _print_report(
        "fuse",
        {
            "strategy": args.strategy,
            "ct": args.ct,
            "ot": args.ot,
            "min_stuff_area": args.min_stuff_area,
            "instances_in": len(instances),
            "instances_kept": len(surviving),
        },
        watch,
        outputs,
        [str(w.message) for w in captured],
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _list_pngs(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.glob("*.png"))}


def _eval_one(name: str, pred_dir: Path, gt_dir: Path, classes: ClassConfig):
    pred = read_panoptic_png(pred_dir / name, classes)
    gt = read_panoptic_png(gt_dir / name, classes)
    return match_segments(pred, gt, classes), pred.class_map, gt.class_map


def _metric_lines(pq_report, miou_report, classes: ClassConfig, n_images: int):
    lines = [f"n_images {n_images}"]
    for label, stats in (
        ("all", pq_report.all),
        ("stuff", pq_report.stuff),
        ("things", pq_report.things),
    ):
        lines.append(f"pq_{label} {stats.pq:.6f}")
        lines.append(f"sq_{label} {stats.sq:.6f}")
        lines.append(f"rq_{label} {stats.rq:.6f}")
        lines.append(f"n_{label} {stats.n_classes}")
    lines.append(f"miou {miou_report.miou:.6f}")
    by_id = {r.class_id: r for r in pq_report.per_class}
    for cdef in classes.classes:
        r = by_id[cdef.class_id]
        iou = miou_report.per_class.get(cdef.class_id)
        miou_txt = f"{iou:.6f}" if iou is not None else "n/a"
        lines.append(
            f"class id={cdef.class_id} name={cdef.name} pq={r.pq:.6f} "
            f"sq={r.sq:.6f} rq={r.rq:.6f} tp={r.tp} fp={r.fp} fn={r.fn} "
            f"iou_sum={r.iou_sum:.6f} miou={miou_txt}"
        )
    return lines


def cmd_eval(args) -> int:
    watch = _Stopwatch()
    classes = _resolve_classes(args)
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} does not exist")
    preds = _list_pngs(pred_dir)
    gts = _list_pngs(gt_dir)
    if preds.keys() != gts.keys():
        only_pred = sorted(preds.keys() - gts.keys())
        only_gt = sorted(gts.keys() - preds.keys())
        raise DataError(
            "prediction and ground-truth directories disagree: "
            f"only in predictions {only_pred}, only in ground truth {only_gt}"
        )
    if not preds:
        raise DataError(f"no .png files found under {pred_dir}")
    names = sorted(preds)
    watch.lap("scan")

    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [_eval_one(n, pred_dir, gt_dir, classes) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda n: _eval_one(n, pred_dir, gt_dir, classes), names)
            )
    watch.lap("match")

    matches = [r[0] for r in results]
    pq_report = compute_pq(matches, classes)
    miou_report = compute_miou(
        [r[1] for r in results], [r[2] for r in results], classes
    )
    watch.lap("aggregate")

    lines = _metric_lines(pq_report, miou_report, classes, len(names))
    outputs = []
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        outputs.append(args.out)
    watch.lap("write")

    for line in lines:
        print(line)
    print()
    _print_report(
        "eval",
        {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "jobs": jobs},
        watch,
        outputs,
        [],
    )
    return 0


# ---------------------------------------------------------------------------
# loss


def _read_pairs_file(path, n_floats: int, what: str):
    rows = []
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            values = [float(v) for v in parts]
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if n_floats and len(values) != n_floats:
            raise FormatError(
                f"{what}: expected {n_floats} values per line, got {len(values)}",
                path=path, line=lineno,
            )
        rows.append(values)
    return rows


def _int_maps_from_ptsr(path) -> np.ndarray:
    t = read_ptsr(path)
    arr = t.data.astype(np.float64)
    ints = np.rint(arr)
    if np.abs(arr - ints).max() > 1e-6:
        raise DataError(f"{path}: tensor is not integer-valued")
    return ints.astype(np.int64)


def cmd_loss(args) -> int:
    watch = _Stopwatch()
    with warnings.catch_warnings(record=True) as captured:
        warnings.simplefilter("always")
        config: dict = {"kind": args.loss_kind}
        lines: list[str] = []

        if args.loss_kind == "semantic":
            pred = read_ptsr(args.pred)
            gt4 = _int_maps_from_ptsr(args.gt)
            if gt4.shape[1] != 1:
                raise DataError(
                    f"gt tensor must have dims (n, 1, H, W), got {gt4.shape}"
                )
            value = semantic_loss(pred, gt4[:, 0], void_id=args.void_id)
            config["void_id"] = args.void_id
            lines.append(f"loss_semantic {value:.6f}")
        elif args.loss_kind == "mask":
            pred = read_ptsr(args.pred)
            gt = _int_maps_from_ptsr(args.gt)
            if pred.dims != tuple(gt.shape):
                raise DataError(
                    f"pred dims {pred.dims} and gt dims {tuple(gt.shape)} differ"
                )
            pairs = [
                (gt[i, 0], pred.data[i, 0]) for i in range(pred.dims[0])
            ]
            value = mask_loss(pairs, args.capacity)
            if args.capacity is not None:
                config["capacity"] = args.capacity
            lines.append(f"loss_mask {value:.6f}")
        elif args.loss_kind == "objectness":
            rows = _read_pairs_file(args.pairs, 2, "objectness")
            value = objectness_loss([(r[0], r[1]) for r in rows])
            lines.append(f"loss_objectness {value:.6f}")
        elif args.loss_kind == "classification":
            rows = _read_pairs_file(args.pairs, 0, "classification")
            samples = []
            for row in rows:
                idx = int(row[0])
                dist = row[1:]
                if not dist or not 0 <= idx < len(dist):
                    raise DataError(
                        f"classification row needs a valid target index, got {row}"
                    )
                onehot = [0.0] * len(dist)
                onehot[idx] = 1.0
                samples.append((onehot, dist))
            value = classification_loss(samples)
            lines.append(f"loss_classification {value:.6f}")
        elif args.loss_kind == "boxes":
            rows = _read_pairs_file(args.pairs, 8, "boxes")
            pairs = [
                (BoxDelta(*row[:4]), BoxDelta(*row[4:])) for row in rows
            ]
            value = regression_loss(pairs, args.normalizer)
            config["normalizer"] = args.normalizer
            lines.append(f"loss_boxes {value:.6f}")
        else:  # total
            value = total_loss(
                args.semantic, args.objectness, args.proposal,
                args.classification, args.bbox, args.mask,
            )
            inst = value - args.semantic
            for key in ("semantic", "objectness", "proposal",
                        "classification", "bbox", "mask"):
                lines.append(f"loss_{key} {getattr(args, key):.6f}")
            lines.append(f"loss_instance {inst:.6f}")
            lines.append(f"loss_total {value:.6f}")
        watch.lap("compute")

    for line in lines:
        print(line)
    _print_report("loss", config, watch, [], [str(w.message) for w in captured])
    return 0


# ---------------------------------------------------------------------------
# params


def cmd_params(args) -> int:
    watch = _Stopwatch()
    if args.layers:
        layers_path = Path(args.layers)
    else:
        layers_path = _config_dir_file("mask_head.layers") or (
            Path(__file__).parent / "data" / "mask_head.layers"
        )
    layers = parse_layer_file(layers_path)
    report = count_params(layers)
    watch.lap("count")

    print(f"command params")
    print(f"config layers_file={layers_path}")
    for lc in report.layers:
        print(
            f"layer name={lc.name} kind={lc.kind} params={lc.params} "
            f"affine={lc.affine_params}"
        )
    print(f"params_total {report.total}")
    print(f"params_standard {report.by_kind['standard']}")
    print(f"params_separable {report.by_kind['separable']}")
    print(f"affine_total {report.affine_total}")
    if args.compare == "standard":
        compare_total = standard_equivalent_total(layers)
        delta = compare_total - report.total
        print(f"compare_total {compare_total}")
        print(f"compare_delta {delta}")
        print(f"compare_delta_millions {delta / 1e6:.2f}")
    for name, ms in watch.stages:
        print(f"timing_ms {name}={ms:.6f}")
    return 0


# ---------------------------------------------------------------------------
# forward


def cmd_forward(args) -> int:
    watch = _Stopwatch()
    feats = read_encoder_features(args.features)
    weights = load_weight_bundle(args.weights)
    if args.classes:
        classes = load_class_config(args.classes)
        class_ids = classes.class_ids
    else:
        class_ids = tuple(range(weights.head.n_classes))
    watch.lap("load")
    logits = semantic_pipeline_forward(feats, weights, class_ids)
    watch.lap("forward")
    write_ptsr(args.out, logits.scores)
    watch.lap("write")
    _print_report(
        "forward",
        {
            "features": str(args.features),
            "weights": str(args.weights),
            "dims": "x".join(str(d) for d in logits.scores.dims),
        },
        watch,
        [args.out],
        [],
    )
    return 0


# ---------------------------------------------------------------------------
# fixture


def cmd_fixture(args) -> int:
    watch = _Stopwatch()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list = []

    if args.kind == "fuse":
        classes = small_class_config(4, 3)
        classes_path = out / "classes.txt"
        save_class_config(classes, classes_path)
        outputs.append(classes_path)
        (out / "gt").mkdir(exist_ok=True)
        (out / "inputs").mkdir(exist_ok=True)
        for i in range(args.count):
            scene = generate_scene(
                args.seed + i, classes, args.height, args.width,
                n_instances=args.instances,
            )
            name = f"image_{i:03d}"
            outputs += write_panoptic_png(scene.gt, classes, out / "gt" / f"{name}.png")
            sem_path = out / "inputs" / f"{name}.semantic.ptsr"
            write_ptsr(sem_path, scene.semantic.scores)
            outputs.append(sem_path)
            outputs += write_instance_manifest(
                out / "inputs" / f"{name}.instances.txt", scene.instances
            )
    else:  # forward
        feats = generate_encoder_features(args.seed, (args.height, args.width))
        outputs += write_encoder_features(feats, out / "features")
        weights = make_pipeline_weights(args.seed + 1, n_classes=args.classes_count)
        outputs += save_weight_bundle(weights, out / "weights")
    watch.lap("generate")

    _print_report(
        "fixture",
        {
            "kind": args.kind,
            "seed": args.seed,
            "height": args.height,
            "width": args.width,
        },
        watch,
        outputs,
        [],
    )
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--jobs", type=int, default=1,
                        help="worker threads for directory commands (default 1)")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for fixture generation (default 0)")
    common.add_argument("--verbose", action="store_true",
                        help="progress diagnostics on stderr")

    parser = _Parser(prog="panoptikit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("fuse", parents=[common],
                       help="fuse instance and semantic logits into a panoptic PNG")
    p.add_argument("--semantic", required=True, help="semantic scores PTSR (1,C,H,W)")
    p.add_argument("--instances", required=True, help="instance manifest path")
    p.add_argument("--classes", help="class registry file (default: bundled)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--ct", type=float, default=0.5,
                   help="confidence threshold (default 0.5)")
    p.add_argument("--ot", type=float, default=0.5,
                   help="overlap threshold (default 0.5)")
    p.add_argument("--min-stuff-area", type=int, default=2048,
                   help="minimum stuff segment area in pixels (default 2048)")
    p.add_argument("--strategy", choices=FUSION_STRATEGIES, default="adaptive")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions against ground truth (PQ/SQ/RQ/mIoU)")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", help="class registry file (default: bundled)")
    p.add_argument("--out", help="write the metric report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", parents=[common], help="compute loss terms")
    loss_sub = p.add_subparsers(dest="loss_kind", required=True,
                                parser_class=_Parser)
    q = loss_sub.add_parser("semantic", parents=[common])
    q.add_argument("--pred", required=True, help="probabilities PTSR (n,C,H,W)")
    q.add_argument("--gt", required=True,
                   help="channel-index map PTSR (n,1,H,W), integer-valued")
    q.add_argument("--void-id", type=int, default=255)
    q.set_defaults(func=cmd_loss)
    q = loss_sub.add_parser("mask", parents=[common])
    q.add_argument("--pred", required=True, help="mask probabilities PTSR (K,1,h,w)")
    q.add_argument("--gt", required=True,
                   help="targets PTSR (K,1,h,w): 1, 0, or -1 for void")
    q.add_argument("--capacity", type=int, default=None,
                   help="divide by this instead of the pair count")
    q.set_defaults(func=cmd_loss)
    q = loss_sub.add_parser("objectness", parents=[common])
    q.add_argument("--pairs", required=True, help="text file: '<target> <prob>' lines")
    q.set_defaults(func=cmd_loss)
    q = loss_sub.add_parser("classification", parents=[common])
    q.add_argument("--pairs", required=True,
                   help="text file: '<target-index> <p0> <p1> ...' lines")
    q.set_defaults(func=cmd_loss)
    q = loss_sub.add_parser("boxes", parents=[common])
    q.add_argument("--pairs", required=True,
                   help="text file: 8 floats per line (4 target + 4 predicted deltas)")
    q.add_argument("--normalizer", type=float, required=True)
    q.set_defaults(func=cmd_loss)
    q = loss_sub.add_parser("total", parents=[common])
    for name in ("semantic", "objectness", "proposal", "classification",
                 "bbox", "mask"):
        q.add_argument(f"--{name}", type=float, required=True)
    q.set_defaults(func=cmd_loss)

    p = sub.add_parser("params", parents=[common],
                       help="count parameters from a layer description")
    p.add_argument("--layers", help="layer description file (default: bundled)")
    p.add_argument("--compare", choices=["standard"],
                   help="also report the all-standard-conv equivalent and delta")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("forward", parents=[common],
                       help="run the pyramid + semantic head over encoder features")
    p.add_argument("--features", required=True, help="directory with f4..f32.ptsr")
    p.add_argument("--weights", required=True, help="weight bundle directory")
    p.add_argument("--classes", help="class registry for the channel binding")
    p.add_argument("--out", required=True, help="output PTSR path")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("fixture", parents=[common],
                       help="generate seeded synthetic inputs")
    p.add_argument("--kind", choices=["fuse", "forward"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="scenes to generate")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--instances", type=int, default=3,
                   help="ground-truth instances per scene (fuse fixtures)")
    p.add_argument("--classes-count", type=int, default=19,
                   help="semantic channels (forward fixtures)")
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "height", None) is None and hasattr(args, "height"):
        args.height = 96 if args.kind == "fuse" else 64
    if getattr(args, "width", None) is None and hasattr(args, "width"):
        args.width = 160 if args.kind == "fuse" else 128
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"panoptikit: invariant violation: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"panoptikit: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        target = exc.filename if exc.filename else exc
        print(f"panoptikit: error: missing file {target}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"panoptikit: error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console_scripts hook
    sys.exit(main())
