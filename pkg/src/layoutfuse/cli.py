"""Command-line pipeline: split -> degrade -> fuse -> evaluate / tune.

Flags override config-file values; seeds are mandatory wherever randomness is
involved (split, degrade, tune), so every command is reproducible byte for
byte. Diagnostics go to stderr, data to stdout and files, and an output
directory is guarded by a lock file against concurrent invocations.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

from . import dataset as ds
from . import degrade as dg
from . import ensemble as es
from . import metrics as mt
from . import tuner as tn


class CliError(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".layoutfuse.lock"
    try:
        fd = lock.open("x")
    except FileExistsError:
        raise CliError(
            f"output directory {out_dir} is locked by another invocation "
            f"(stale? remove {lock})"
        ) from None
    try:
        fd.close()
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError(f"config {p} must be a JSON object")
    return obj


def _merge(args: argparse.Namespace, config: dict, key: str, required: bool = False):
    value = getattr(args, key, None)
    if value is None:
        value = config.get(key)
    if value is None and required:
        raise CliError(f"missing required option --{key.replace('_', '-')}")
    return value


def _require_annotations(args, config) -> ds.AnnotationSet:
    path = _merge(args, config, "annotations", required=True)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"annotations file not found: {p}")
    return ds.load_annotations(p)


def _require_seed(args, config) -> int:
    seed = _merge(args, config, "seed")
    if seed is None:
        raise CliError("a --seed is required; wall-clock defaults are not allowed")
    return int(seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def cmd_split(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    data = _require_annotations(args, config)
    k = int(_merge(args, config, "k", required=True))
    seed = _require_seed(args, config)
    out = Path(_merge(args, config, "out", required=True))
    with output_lock(out):
        plan = ds.stratified_group_kfold(data, k, seed)
        _write_json(out / "fold_plan.json", plan.to_json())
        report = ds.format_fold_report(ds.fold_report(plan))
        (out / "fold_report.txt").write_text(report + "\n", encoding="utf-8")
        print(report)
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    data = _require_annotations(args, config)
    images_dir = Path(_merge(args, config, "images", required=True))
    plan_path = _merge(args, config, "plan", required=True)
    seed = _require_seed(args, config)
    out = Path(_merge(args, config, "out", required=True))
    if not images_dir.is_dir():
        raise CliError(f"images directory not found: {images_dir}")
    plan_file = Path(plan_path)
    if not plan_file.is_file():
        raise CliError(f"fold plan not found: {plan_file}")
    plan = ds.FoldPlan.from_json(json.loads(plan_file.read_text()), data)
    if "degradation" in config:
        deg_config = dg.DegradationConfig.from_json(config["degradation"])
    else:
        deg_config = dg.DegradationConfig.default(seed)
    max_image_id = max((i.id for i in data.images), default=0)
    max_ann_id = max((a.id for a in data.annotations), default=0)
    failures: list[tuple[str, str]] = []
    with output_lock(out):
        for fold in range(plan.k):
            fold_ids = set(plan.fold_image_ids(fold))
            subset = data.subset(fold_ids)
            augmented = dg.degrade_fold(
                subset,
                images_dir,
                deg_config,
                out / f"fold_{fold}",
                image_id_offset=dg.id_offset(max_image_id),
                annotation_id_offset=dg.id_offset(max_ann_id),
                error_sink=failures,
            )
            ds.save_annotations(augmented, out / f"fold_{fold}" / "annotations.json")
    for name, message in failures:
        print(f"degrade failed for {name}: {message}", file=sys.stderr)
    return 1 if failures else 0


def _load_bundles(args, config) -> list[es.PredictionBundle]:
    paths = _merge(args, config, "bundles", required=True)
    if isinstance(paths, str):
        paths = [paths]
    bundles = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise CliError(f"bundle file not found: {p}")
        bundles.append(es.load_bundle(p))
    if not bundles:
        raise CliError("at least one --bundles file is required")
    return bundles


def _ensemble_config(args, config) -> es.EnsembleConfig:
    base = config.get("ensemble", {})
    conf = _merge(args, config, "conf")
    iou = _merge(args, config, "iou")
    quorum = _merge(args, config, "quorum")
    iou_kind = _merge(args, config, "iou_kind")
    return es.EnsembleConfig(
        confidence_threshold=float(conf if conf is not None else base.get("confidence_threshold", 0.25)),
        iou_threshold=float(iou if iou is not None else base.get("iou_threshold", 0.7)),
        vote_quorum=(
            int(quorum) if quorum is not None else base.get("vote_quorum")
        ),
        iou_kind=iou_kind if iou_kind is not None else base.get("iou_kind", "box"),
    )


def _grids_from_bundles(bundles) -> list[tuple[int, int, int]]:
    grids: dict[int, tuple[int, int]] = {}
    for b in bundles:
        for p in b.predictions:
            known = grids.get(p.image_id)
            new = (p.mask.height, p.mask.width)
            if known is None:
                grids[p.image_id] = new
            elif known != new:
                raise CliError(
                    f"bundles disagree on the grid of image {p.image_id}: {known} vs {new}"
                )
    return [(i, h, w) for i, (h, w) in sorted(grids.items())]


def cmd_fuse(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    bundles = _load_bundles(args, config)
    ens_config = _ensemble_config(args, config)
    out = Path(_merge(args, config, "out", required=True))
    annotations = _merge(args, config, "annotations")
    if annotations:
        truth = ds.load_annotations(annotations)
        images = list(truth.images)
        category_ids = [c.id for c in truth.categories]
    else:
        images = _grids_from_bundles(bundles)
        category_ids = sorted({p.category_id for b in bundles for p in b.predictions})
    with output_lock(out):
        fused_instances = es.fuse_instancewise(bundles, ens_config)
        classwise = es.fuse_classwise(bundles, ens_config, images)
        _write_json(out / "instances.json", es.instance_predictions_to_json(fused_instances))
        _write_json(out / "classwise.json", es.classwise_to_json(classwise))
        es.write_submission_csv(classwise, category_ids, out / "submission.csv")
    print(
        f"fused {sum(len(v) for v in fused_instances.values())} instances "
        f"over {len(images)} images from {len(bundles)} bundles"
    )
    return 0


def _format_metrics(report: mt.MetricsReport) -> str:
    lines = []
    if report.dice is not None:
        lines.append(f"dice overall: {report.dice.overall:.5f}")
        for name, value in report.dice.per_category.items():
            lines.append(f"  dice[{name}]: {value:.5f}")
    if report.map_mask is not None:
        lines.append(f"mAP50-95 (mask): {report.map_mask:.5f}")
    if report.map_box is not None:
        lines.append(f"mAP50-95 (box): {report.map_box:.5f}")
    if report.confusion is not None:
        lines.append("confusion (columns = true, normalized):")
        norm = report.confusion.normalized()
        width = max(len(l) for l in report.confusion.labels)
        header = " ".join(l.rjust(width) for l in ("", *report.confusion.labels))
        lines.append(header)
        for label, row in zip(report.confusion.labels, norm):
            lines.append(
                " ".join([label.rjust(width), *(f"{v:.2f}".rjust(width) for v in row)])
            )
    return "\n".join(lines)


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    truth = _require_annotations(args, config)
    out = Path(_merge(args, config, "out", required=True))
    pred_instances = _merge(args, config, "pred_instances")
    pred_classwise = _merge(args, config, "pred_classwise")
    pred_submission = _merge(args, config, "pred_submission")
    if not (pred_instances or pred_classwise or pred_submission):
        raise CliError(
            "need at least one of --pred-instances, --pred-classwise, --pred-submission"
        )
    index = mt.GroundTruthIndex(truth)

    classwise = None
    if pred_classwise:
        classwise = es.classwise_from_json(
            json.loads(Path(pred_classwise).read_text(encoding="utf-8"))
        )
    elif pred_submission:
        grids = {i.id: (i.height, i.width) for i in truth.images}
        classwise = es.read_submission_csv(pred_submission, grids)

    instances = None
    if pred_instances:
        bundle = es.load_bundle(Path(pred_instances), model_id="predictions")
        instances = {}
        for p in bundle.predictions:
            instances.setdefault(p.image_id, []).append(p)

    if classwise is None and instances is not None:
        # Derive classwise masks as the per-category union of instances.
        single = [es.PredictionBundle("predictions", tuple(bundle.predictions))]
        cfg = es.EnsembleConfig(confidence_threshold=0.0, iou_threshold=1.0, vote_quorum=1)
        classwise = es.fuse_classwise(single, cfg, truth.images)

    known_ids = {i.id for i in truth.images}
    unknown = sorted(
        ({s.image_id for s in classwise or ()} | set(instances or ())) - known_ids
    )
    if unknown:
        raise CliError(
            f"{len(unknown)} predicted image ids missing from the ground truth "
            f"(first few: {unknown[:5]})"
        )

    dice = mt.evaluate_dice(classwise, truth, index=index) if classwise else None
    map_mask = map_box = None
    map_mask_pc = map_box_pc = None
    confusion = None
    if instances is not None:
        map_mask, map_mask_pc = mt.mean_ap_50_95(instances, truth, "mask", index=index)
        map_box, map_box_pc = mt.mean_ap_50_95(instances, truth, "box", index=index)
        confusion = mt.confusion_matrix(instances, truth, index=index)
    report = mt.MetricsReport(dice, map_mask, map_box, map_mask_pc, map_box_pc, confusion)
    with output_lock(out):
        report.save(out / "report.json")
        if confusion is not None:
            confusion.to_csv(out / "confusion.csv")
    print(_format_metrics(report))
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    truth = _require_annotations(args, config)
    bundles = _load_bundles(args, config)
    seed = _require_seed(args, config)
    budget = int(_merge(args, config, "budget") or 40)
    objective = args.objective.replace("-", "_")
    out = Path(_merge(args, config, "out", required=True))
    with output_lock(out):
        state = tn.TunerState(seed=seed, budget=budget)
        index = mt.GroundTruthIndex(truth)

        def fn(pair: tn.ThresholdPair) -> float:
            return tn.evaluate_objective(pair, bundles, truth, objective, index)

        try:
            best, state = tn.optimize(fn, budget=budget, seed=seed, state=state)
        except Exception:
            state.save_trace(out / "tune_trace.json")
            raise
        state.save_trace(out / "tune_trace.json")
        base = _ensemble_config(args, config)
        best_config = es.EnsembleConfig(
            confidence_threshold=best.confidence,
            iou_threshold=best.iou,
            vote_quorum=base.vote_quorum,
            iou_kind=base.iou_kind,
        )
        _write_json(out / "best_config.json", best_config.to_json())
    print(
        f"best thresholds: confidence={best.confidence:.4f} iou={best.iou:.4f} "
        f"objective={state.best()[1]:.5f} after {len(state.points)} evaluations"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutfuse",
        description="Post-training pipeline for ensembled document-layout segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--annotations", help="COCO-style annotation JSON")
        p.add_argument("--images", help="directory of source images")
        p.add_argument("--bundles", nargs="+", help="per-model prediction JSON files")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed (mandatory where used)")
        p.add_argument("--config", help="pipeline config JSON; flags win")

    p_split = sub.add_parser("split", help="stratified group k-fold plan + report")
    common(p_split)
    p_split.add_argument("--k", type=int, help="fold count")
    p_split.set_defaults(func=cmd_split)

    p_degrade = sub.add_parser("degrade", help="write degraded copies of each fold")
    common(p_degrade)
    p_degrade.add_argument("--plan", help="fold plan JSON from `split`")
    p_degrade.set_defaults(func=cmd_degrade)

    p_fuse = sub.add_parser("fuse", help="fuse prediction bundles")
    common(p_fuse)
    p_fuse.add_argument("--conf", type=float, help="confidence threshold")
    p_fuse.add_argument("--iou", type=float, help="IoU threshold for NMS")
    p_fuse.add_argument("--quorum", type=int, help="votes needed per pixel")
    p_fuse.add_argument("--iou-kind", choices=("box", "mask"), dest="iou_kind")
    p_fuse.set_defaults(func=cmd_fuse)

    p_eval = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p_eval)
    p_eval.add_argument("--pred-instances", dest="pred_instances")
    p_eval.add_argument("--pred-classwise", dest="pred_classwise")
    p_eval.add_argument("--pred-submission", dest="pred_submission")
    p_eval.set_defaults(func=cmd_evaluate)

    p_tune = sub.add_parser("tune", help="Bayesian threshold search")
    common(p_tune)
    p_tune.add_argument("--budget", type=int, help="total objective evaluations")
    p_tune.add_argument("--conf", type=float, help=argparse.SUPPRESS)
    p_tune.add_argument("--iou", type=float, help=argparse.SUPPRESS)
    p_tune.add_argument("--quorum", type=int, help="quorum stored in the tuned config")
    p_tune.add_argument("--iou-kind", choices=("box", "mask"), dest="iou_kind")
    p_tune.add_argument(
        "--objective",
        choices=("classwise-dice", "instance-map"),
        default="classwise-dice",
    )
    p_tune.set_defaults(func=cmd_tune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        ds.DatasetError,
        dg.DegradeError,
        es.BundleError,
        tn.BudgetExhaustedError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
