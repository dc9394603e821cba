import argparse
import csv
import logging
import os
import sys
from typing import Dict, List, Sequence, Set, Tuple, Union

from pydantic import ValidationError

from dynaseg import __version__
from dynaseg.backbones import build_cnn_backbone, build_resnet_fpn_backbone, cnn_parameter_count, count_parameters
from dynaseg.config import build_config, write_effective_config
from dynaseg.core import ImageTensor, LabelMap
from dynaseg.datasets import check_layout, load_item, load_manifest, synthetic_corpus
from dynaseg.evaluation import evaluate_dataset, evaluate_per_image, write_per_class_csv, write_report
from dynaseg.exceptions import DynaSegConfigError, DynaSegDatasetError, DynaSegException
from dynaseg.io import read_image, read_label_map, write_label_map, write_overlay
from dynaseg.overrides import ConfigOverrideFactory
from dynaseg.schemas.config import BackboneKind, MuSchedule, RunConfig, ScheduleKind, SyntheticSpec, TrainMode
from dynaseg.schemas.datasets import DatasetName, GroundTruth
from dynaseg.schemas.evaluation import BsdStrategy, EvalReport
from dynaseg.schemas.results import BatchOutcome, GateStats, SegmentationFailure
from dynaseg.trainer import first_iteration_gate, segment_batch, write_training_log

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

SWEEP_COLUMNS = ["schedule", "param", "value", "miou", "pixel_acc", "mean_final_q", "mean_iters", "failures"]
GATE_COLUMNS = ["source_id", "first_q", "opt_nC", "threshold", "fixed_threshold", "gt_segments"]

Item = Tuple[ImageTensor, Union[GroundTruth, None]]
SweepKey = Tuple[str, str, str]


def _csv_floats(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lista de números inválida: {value}")


def _add_input_flags(parser: argparse.ArgumentParser, images: bool = True) -> None:
    group = parser.add_argument_group("entradas")
    if images:
        group.add_argument("--image", nargs="+", help="Una o más imágenes")
    group.add_argument("--dataset", choices=[d.value for d in DatasetName])
    group.add_argument("--root", help="Raíz del dataset")
    group.add_argument("--split", default="test")
    group.add_argument("--id-list", help="Archivo con los ids a usar (un id por línea)")
    group.add_argument("--limit", type=int, help="Usar solo los primeros N ítems")
    group.add_argument("--synthetic", action="store_true", help="Usar el corpus sintético")
    group.add_argument("--synthetic-images", type=int)
    group.add_argument("--blocks", help="Cantidad de franjas por imagen, separadas por coma")
    group.add_argument("--size", type=int)
    group.add_argument("--noise", type=float)
    group.add_argument("--synthetic-seed", type=int)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuración")
    group.add_argument("--config", help="Archivo de configuración plano (seccion.clave = valor)")
    group.add_argument("--schedule", choices=[s.value for s in ScheduleKind])
    group.add_argument("--alpha", type=float)
    group.add_argument("--mu", type=float)
    group.add_argument("--iters", type=int, help="Máximo de iteraciones T")
    group.add_argument("--mode", choices=[m.value for m in TrainMode])
    group.add_argument("--backbone", choices=[b.value for b in BackboneKind])
    group.add_argument("--weights-path")
    group.add_argument("--allow-random-init", action="store_true", default=None)
    group.add_argument("--silhouette", action=argparse.BooleanOptionalAction, default=None)
    group.add_argument("--threshold", type=int, help="Umbral fijo de q' (desactiva el silhouette)")
    group.add_argument("--feature-source", choices=["response", "color"])
    group.add_argument("--lr", type=float)
    group.add_argument("--p", type=int)
    group.add_argument("--q", type=int)
    group.add_argument("--seed", type=int)


def _overrides(args: argparse.Namespace) -> ConfigOverrideFactory:
    silhouette = args.silhouette
    if args.threshold is not None and silhouette is None:
        silhouette = False
    return (
        ConfigOverrideFactory("schedule")
        .set("kind", args.schedule)
        .set("alpha", args.alpha)
        .set("mu", args.mu)
        .section("train")
        .set("max_iters", args.iters)
        .set("mode", args.mode)
        .section("backbone")
        .set("kind", args.backbone)
        .set("weights_path", args.weights_path)
        .set("allow_random_init", args.allow_random_init)
        .set("p", args.p)
        .set("q", args.q)
        .section("silhouette")
        .set("enabled", silhouette)
        .set("threshold", args.threshold)
        .set("feature_source", args.feature_source)
        .section("optimizer")
        .set("lr", args.lr)
        .section("run")
        .set("seed", args.seed)
    )


def _synthetic_spec(args: argparse.Namespace) -> SyntheticSpec:
    data = (
        ConfigOverrideFactory("synthetic")
        .set("num_images", args.synthetic_images)
        .set("block_counts", args.blocks)
        .set("size", args.size)
        .set("noise", args.noise)
        .set("seed", args.synthetic_seed)
        .parse()
    )
    return SyntheticSpec.model_validate(data.get("synthetic", {}))


def _unique_id(source_id: str, taken: Set[str]) -> str:
    """Agrega un sufijo `_N` a los nombres repetidos para que las salidas no se pisen"""
    candidate, n = source_id, 1
    while candidate in taken:
        candidate = f"{source_id}_{n}"
        n += 1
    taken.add(candidate)
    return candidate


def _collect_items(args: argparse.Namespace, config: RunConfig) -> Tuple[List[Item], List[SegmentationFailure]]:
    """Carga las entradas pedidas; las imágenes que no se pueden decodificar quedan como fallas"""
    items: List[Item] = []
    failures: List[SegmentationFailure] = []

    if getattr(args, "synthetic", False):
        items = [(image, gt) for image, gt in synthetic_corpus(_synthetic_spec(args))]
    elif getattr(args, "dataset", None):
        if not args.root:
            raise DynaSegConfigError("--dataset requiere --root")
        manifest = load_manifest(args.dataset, args.root, args.split, args.id_list)
        resize = None
        if manifest.name == DatasetName.COCO_STUFF and config.train.mode == TrainMode.DATASET:
            resize = config.train.resize
        ids = manifest.item_ids[: args.limit] if args.limit else manifest.item_ids
        for index, item_id in enumerate(ids):
            try:
                items.append(load_item(manifest, item_id, resize))
            except DynaSegDatasetError as e:
                failures.append(SegmentationFailure(index=index, source_id=item_id, error=type(e).__name__, message=str(e)))
    elif getattr(args, "image", None):
        taken: Set[str] = set()
        for index, path in enumerate(args.image):
            try:
                image = read_image(path)
            except DynaSegDatasetError as e:
                failures.append(SegmentationFailure(index=index, source_id=path, error=type(e).__name__, message=str(e)))
                continue
            source_id = _unique_id(image.source_id, taken)
            if source_id != image.source_id:
                logger.warning("%s repite el nombre %s, sus salidas usan %s", path, image.source_id, source_id)
                image = image.model_copy(update={"source_id": source_id})
            items.append((image, None))
    else:
        raise DynaSegConfigError("Debes indicar --image, --dataset o --synthetic")
    return items, failures


def _write_outputs(out: str, images: Dict[str, ImageTensor], outcome: BatchOutcome) -> None:
    for result in outcome.results:
        base = os.path.join(out, result.source_id)
        write_label_map(result.final_labels, f"{base}.labels.png")
        write_overlay(images[result.source_id], result.final_labels, f"{base}.overlay.png")
        write_training_log(result.state, f"{base}.log.jsonl")


def _report_failures(out: str, failures: Sequence[SegmentationFailure]) -> None:
    with open(os.path.join(out, "failures.json"), "w", encoding="utf-8") as f:
        f.write(BatchOutcome(failures=list(failures)).model_dump_json(include={"failures"}, indent=2))
    for failure in failures:
        print(f"FALLA {failure.source_id}: {failure.message}", file=sys.stderr)


def cmd_segment(args: argparse.Namespace) -> int:
    config = build_config(args.config, _overrides(args))
    items, failures = _collect_items(args, config)
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(config, args.out)

    if items:
        outcome = segment_batch([image for image, _ in items], config, parallelism=args.jobs)
        _write_outputs(args.out, {image.source_id: image for image, _ in items}, outcome)
        failures.extend(outcome.failures)
        for result in outcome.results:
            print(
                f"{result.source_id}: q'={result.final_labels.unique_count} "
                f"iteraciones={result.state.iter} detenido_por={result.state.stopped_by.value}"
            )
    elif not failures:
        raise DynaSegConfigError("No hay imágenes para segmentar")

    if failures:
        _report_failures(args.out, failures)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_predictions(directory: str, ids: Sequence[str]) -> Dict[str, LabelMap]:
    predictions = {}
    for item_id in ids:
        path = os.path.join(directory, f"{item_id}.labels.png")
        if os.path.isfile(path):
            predictions[item_id] = read_label_map(path)
    return predictions


def _evaluate(args: argparse.Namespace, ground_truths: Dict[str, GroundTruth], predictions: Dict[str, LabelMap]) -> EvalReport:
    protocol = args.protocol
    if protocol == "auto":
        protocol = "dataset" if args.dataset == DatasetName.COCO_STUFF.value else "per_image"
    if protocol == "dataset":
        manifest = load_manifest(args.dataset, args.root, args.split, args.id_list)
        return evaluate_dataset(predictions, ground_truths, manifest.class_table, args.ignore_label)
    return evaluate_per_image(predictions, ground_truths, args.strategy, jobs=args.jobs)


def _print_report(report: EvalReport) -> None:
    print(f"mIoU={report.miou_all:.4f}")
    if report.bsd_scores is not None:
        bsd = report.bsd_scores
        print(f"mIoU All={bsd.all:.4f} Fine={bsd.fine:.4f} Coarse={bsd.coarse:.4f} Mean={bsd.mean:.4f}")
    if report.miou_things is not None or report.miou_stuff is not None:
        things = "-" if report.miou_things is None else f"{report.miou_things:.4f}"
        stuff = "-" if report.miou_stuff is None else f"{report.miou_stuff:.4f}"
        print(f"mIoU things={things} stuff={stuff}")
    print(f"pAcc={report.pixel_acc:.4f}")


def cmd_eval(args: argparse.Namespace) -> int:
    if args.dataset and args.protocol == "dataset" and args.dataset != DatasetName.COCO_STUFF.value:
        raise DynaSegConfigError("El protocolo 'dataset' requiere la tabla de clases de coco_stuff")
    items, failures = _collect_items(args, RunConfig())
    ground_truths = {image.source_id: gt for image, gt in items if gt is not None}
    if not ground_truths:
        raise DynaSegConfigError("No hay ground truth para evaluar")

    predictions = _load_predictions(args.pred, sorted(ground_truths))
    report = _evaluate(args, ground_truths, predictions)
    report = report.model_copy(update={"missing": sorted(report.missing + [f.source_id for f in failures])})

    os.makedirs(args.out, exist_ok=True)
    write_report(report, os.path.join(args.out, "report.json"))
    write_per_class_csv(report, os.path.join(args.out, "per_class_iou.csv"))
    _print_report(report)

    if report.missing:
        print(f"Faltan {len(report.missing)} predicciones: {', '.join(report.missing[:10])}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _completed_values(path: str) -> Dict[SweepKey, Dict[str, str]]:
    if not os.path.isfile(path):
        return {}
    with open(path, newline="", encoding="utf-8") as f:
        return {(row["schedule"], row["param"], row["value"]): row for row in csv.DictReader(f)}


def cmd_sweep(args: argparse.Namespace) -> int:
    if not args.values:
        raise DynaSegConfigError("La grilla del barrido está vacía")
    if args.param == "mu" and args.schedule not in (None, ScheduleKind.FIXED.value):
        raise DynaSegConfigError("El barrido de mu requiere --schedule fixed")
    if args.param == "mu":
        args.schedule = ScheduleKind.FIXED.value

    base = build_config(args.config, _overrides(args))
    items, failures = _collect_items(args, base)
    if not items:
        raise DynaSegConfigError("No hay imágenes para el barrido")
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(base, args.out)

    path = os.path.join(args.out, "sweep.csv")
    done = _completed_values(path)
    new_file = not os.path.isfile(path)
    partial = bool(failures)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        if new_file:
            writer.writeheader()

        for value in args.values:
            key = repr(float(value))
            schedule = MuSchedule.model_validate({**base.schedule.model_dump(), args.param: float(value)})
            if (schedule.kind.value, args.param, key) in done:
                logger.info("Se omite %s %s=%s, ya está en %s", schedule.kind.value, args.param, key, path)
                continue

            config = base.model_copy(update={"schedule": schedule})
            outcome = segment_batch([image for image, _ in items], config, parallelism=args.jobs)
            partial = partial or not outcome.ok

            row = {
                "schedule": config.schedule.kind.value,
                "param": args.param,
                "value": key,
                "failures": len(outcome.failures),
                "miou": "",
                "pixel_acc": "",
                "mean_final_q": "",
                "mean_iters": "",
            }
            if outcome.results:
                row["mean_final_q"] = f"{sum(r.final_labels.unique_count for r in outcome.results) / len(outcome.results):.4f}"
                row["mean_iters"] = f"{sum(r.state.iter for r in outcome.results) / len(outcome.results):.4f}"
                ground_truths = {image.source_id: gt for image, gt in items if gt is not None}
                predictions = {r.source_id: r.final_labels for r in outcome.results if r.source_id in ground_truths}
                if predictions:
                    report = evaluate_per_image(predictions, {k: ground_truths[k] for k in predictions})
                    row["miou"] = f"{report.miou_all:.6f}"
                    row["pixel_acc"] = f"{report.pixel_acc:.6f}"
            writer.writerow(row)
            f.flush()
            print(",".join(str(row[c]) for c in SWEEP_COLUMNS))

    return EXIT_PARTIAL if partial else EXIT_OK


def _mean(values: Sequence[float]) -> Union[float, None]:
    return sum(values) / len(values) if values else None


def cmd_gate_stats(args: argparse.Namespace) -> int:
    config = build_config(args.config, _overrides(args))
    config = config.model_copy(update={"silhouette": config.silhouette.model_copy(update={"enabled": True})})
    items, failures = _collect_items(args, config)
    if not items:
        raise DynaSegConfigError("No hay imágenes para calcular el umbral")
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(config, args.out)

    fixed = config.silhouette.threshold
    rows: List[GateStats] = []
    for index, (image, gt) in enumerate(items):
        try:
            first_q, threshold, silhouette = first_iteration_gate(image, config)
        except DynaSegException as e:
            failures.append(SegmentationFailure(index=index, source_id=image.source_id, error=type(e).__name__, message=str(e)))
            continue
        rows.append(
            GateStats(
                source_id=image.source_id,
                first_q=first_q,
                opt_nC=None if silhouette is None else silhouette.opt_nC,
                threshold=threshold,
                fixed_threshold=fixed,
                gt_segments=None if gt is None else _mean(gt.segment_counts()),
            )
        )

    with open(os.path.join(args.out, "gate_stats.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=GATE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.model_dump().items()})

    pairs = [(r.opt_nC, r.gt_segments) for r in rows if r.opt_nC is not None and r.gt_segments is not None]
    mean_opt = _mean([r.opt_nC for r in rows if r.opt_nC is not None])
    mean_text = "-" if mean_opt is None else f"{mean_opt:.2f}"
    print(f"imágenes={len(rows)} opt_nC medio={mean_text} umbral fijo={fixed}")
    if pairs:
        silhouette_error = sum(abs(opt - segments) for opt, segments in pairs) / len(pairs)
        fixed_error = sum(abs(fixed - segments) for _, segments in pairs) / len(pairs)
        print(
            f"segmentos GT medio={sum(segments for _, segments in pairs) / len(pairs):.2f} "
            f"error absoluto vs GT: silhouette={silhouette_error:.2f} fijo={fixed_error:.2f}"
        )

    if failures:
        _report_failures(args.out, failures)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_doctor(args: argparse.Namespace) -> int:
    problems = check_layout(args.dataset, args.root, args.split)
    if problems:
        for problem in problems:
            print(f"PROBLEMA: {problem}")
        return EXIT_CONFIG

    manifest = load_manifest(args.dataset, args.root, args.split, args.id_list)
    print(f"{manifest.name.value}/{manifest.split}: {len(manifest.item_ids)} ítems, estructura válida")
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    config = build_config(args.config, _overrides(args))
    cnn_spec = config.backbone.cnn_spec()
    cnn = build_cnn_backbone(cnn_spec, config.backbone.q, head_batch_norm=config.backbone.head_batch_norm)
    print(f"cnn: {count_parameters(cnn)} (forma cerrada {cnn_parameter_count(cnn_spec, config.backbone.q, head_batch_norm=config.backbone.head_batch_norm)})")

    resnet_spec = config.backbone.resnet_spec().model_copy(update={"allow_random_init": True})
    resnet = build_resnet_fpn_backbone(resnet_spec, head_batch_norm=config.backbone.head_batch_norm)
    print(f"resnet_fpn: {count_parameters(resnet)} (pyramid_channels={resnet_spec.pyramid_channels})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynaseg", description="Segmentación no supervisada con pérdida de peso dinámico")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log en nivel DEBUG")
    subparsers = parser.add_subparsers(dest="command", required=True)

    segment = subparsers.add_parser("segment", help="Segmenta imágenes")
    _add_input_flags(segment)
    _add_config_flags(segment)
    segment.add_argument("--jobs", type=int, default=1)
    segment.add_argument("--out", default="out")
    segment.set_defaults(func=cmd_segment)

    evaluate = subparsers.add_parser("eval", help="Evalúa predicciones contra el ground truth")
    _add_input_flags(evaluate, images=False)
    evaluate.add_argument("--pred", required=True, help="Directorio con los archivos <id>.labels.png")
    evaluate.add_argument("--protocol", choices=["auto", "per_image", "dataset"], default="auto")
    evaluate.add_argument("--strategy", choices=[s.value for s in BsdStrategy], default=BsdStrategy.ALL.value)
    evaluate.add_argument("--ignore-label", type=int)
    evaluate.add_argument("--jobs", type=int, default=1)
    evaluate.add_argument("--out", default="out")
    evaluate.set_defaults(func=cmd_eval)

    sweep = subparsers.add_parser("sweep", help="Barrido de α o μ")
    _add_input_flags(sweep)
    _add_config_flags(sweep)
    sweep.add_argument("--param", choices=["alpha", "mu"], default="alpha")
    sweep.add_argument("--values", type=_csv_floats, required=True, help="Valores separados por coma")
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--out", default="out")
    sweep.set_defaults(func=cmd_sweep)

    gate = subparsers.add_parser("gate-stats", help="Compara el opt_nC de la primera iteración con el ground truth")
    _add_input_flags(gate)
    _add_config_flags(gate)
    gate.add_argument("--out", default="out")
    gate.set_defaults(func=cmd_gate_stats)

    doctor = subparsers.add_parser("doctor", help="Valida la estructura de un dataset")
    doctor.add_argument("--dataset", choices=[d.value for d in DatasetName], required=True)
    doctor.add_argument("--root", required=True)
    doctor.add_argument("--split", default="test")
    doctor.add_argument("--id-list")
    doctor.set_defaults(func=cmd_doctor)

    params = subparsers.add_parser("params", help="Cuenta parámetros de ambos backbones")
    _add_config_flags(params)
    params.set_defaults(func=cmd_params)
    return parser


def main(argv: Union[Sequence[str], None] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except (ValidationError, DynaSegConfigError) as e:
        print(f"Error de configuración: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DynaSegDatasetError as e:
        print(f"Error de dataset: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DynaSegException as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except (OSError, ValueError) as e:
        logger.debug("Error no controlado", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
