import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from dynaseg.core import LabelMap
from dynaseg.exceptions import (
    DynaSegEmptyEvalError,
    DynaSegInvalidSpecError,
    DynaSegNoGroundTruthError,
    DynaSegShapeMismatchError,
)
from dynaseg.schemas.datasets import ClassInfo, GroundTruth
from dynaseg.schemas.evaluation import (
    Assignment,
    BsdScores,
    BsdStrategy,
    ClassKind,
    ConfusionMatrix,
    EvalReport,
)

logger = logging.getLogger(__name__)


def _positions(ids: np.ndarray, values: np.ndarray, field: str) -> np.ndarray:
    idx = np.searchsorted(ids, values)
    if values.size:
        clipped = np.minimum(idx, max(len(ids) - 1, 0))
        if len(ids) == 0 or np.any(ids[clipped] != values):
            raise DynaSegInvalidSpecError(field, "hay etiquetas fuera del conjunto declarado")
    return idx


def confusion(
    pred: LabelMap,
    gt: LabelMap,
    ignore_label: Union[int, None] = None,
    *,
    pred_ids: Union[Sequence[int], None] = None,
    gt_ids: Union[Sequence[int], None] = None,
) -> ConfusionMatrix:
    """Matriz de confusión entre etiquetas predichas y clases del ground truth

    Las filas son las etiquetas predichas presentes (ordenadas) y las columnas las clases
    presentes en el ground truth, salvo que se declaren explícitamente con `pred_ids` y
    `gt_ids` (necesario para acumular varias imágenes en una misma matriz).

    Parámetros:
        pred: Etiquetas predichas.
        gt: Ground truth.
        ignore_label: Parámetro opcional, los píxeles con esta clase no se cuentan.

    Retorna:
        Objeto `ConfusionMatrix`

    Errores:
        `dynaseg.exceptions.DynaSegShapeMismatchError`: `pred` y `gt` difieren en H×W.
        `dynaseg.exceptions.DynaSegInvalidSpecError`: Hay etiquetas fuera de `pred_ids`/`gt_ids`.
    """
    if tuple(pred.shape) != tuple(gt.shape):
        raise DynaSegShapeMismatchError(tuple(gt.shape), tuple(pred.shape))

    p = pred.labels.ravel()
    g = gt.labels.ravel()
    if ignore_label is not None:
        keep = g != ignore_label
        p, g = p[keep], g[keep]

    rows = np.unique(p) if pred_ids is None else np.asarray(sorted(set(pred_ids)), dtype=np.int64)
    cols = np.unique(g) if gt_ids is None else np.asarray(sorted(set(gt_ids)), dtype=np.int64)
    r = _positions(rows, p, "pred")
    c = _positions(cols, g, "gt")

    counts = np.bincount(r * len(cols) + c, minlength=len(rows) * len(cols))
    return ConfusionMatrix(
        counts=counts.reshape(len(rows), len(cols)),
        pred_ids=[int(v) for v in rows],
        gt_ids=[int(v) for v in cols],
    )


def _best_completion(counts: np.ndarray, rows: List[int], cols: List[int]) -> Tuple[int, int]:
    """(suma máxima, cardinalidad) de una asignación sobre la submatriz rows × cols"""
    if not rows or not cols:
        return 0, 0
    sub = counts[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    return int(sub[r, c].sum()), len(r)


def hungarian_assign(cm: ConfusionMatrix) -> Assignment:
    """Asignación uno a uno que maximiza los píxeles coincidentes

    Entre todas las asignaciones óptimas de cardinalidad min(P, G) retorna la
    lexicográficamente menor recorriendo las filas en orden (dejar una fila sin asignar
    se ordena después de cualquier columna).

    Retorna:
        Objeto `Assignment` con índices de fila → índices de columna
    """
    counts = cm.counts
    n_rows, n_cols = counts.shape
    size = min(n_rows, n_cols)
    if size == 0:
        return Assignment(mapping={}, matched_count=0)

    best, _ = _best_completion(counts, list(range(n_rows)), list(range(n_cols)))

    mapping: Dict[int, int] = {}
    fixed = 0
    free_cols = list(range(n_cols))
    for row in range(n_rows):
        rest = list(range(row + 1, n_rows))
        chosen = None
        for col in free_cols:
            remaining = [c for c in free_cols if c != col]
            if rest and remaining:
                bound = int(counts[np.ix_(rest, remaining)].max(axis=1).sum())
            else:
                bound = 0
            if fixed + int(counts[row, col]) + bound < best:
                continue
            value, card = _best_completion(counts, rest, remaining)
            if fixed + int(counts[row, col]) + value == best and len(mapping) + 1 + card == size:
                chosen = col
                break

        if chosen is None:
            # La fila queda sin asignar, solo es posible cuando P > G
            continue
        mapping[row] = chosen
        fixed += int(counts[row, chosen])
        free_cols.remove(chosen)
        if len(mapping) == size:
            break

    return Assignment(mapping=mapping, matched_count=fixed)


def _mean(values: Sequence[Union[float, None]]) -> Union[float, None]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.mean(present))


def miou(
    cm: ConfusionMatrix,
    assignment: Assignment,
    class_split: Union[Mapping[int, Union[ClassKind, str]], None] = None,
    class_names: Union[Sequence[str], None] = None,
) -> EvalReport:
    """mIoU y exactitud por píxel bajo una asignación

    Para cada clase g con fila asignada p: IoU = TP / (TP + FP + FN) con TP = counts[p, g],
    FP = resto de la fila p y FN = resto de la columna g. Los píxeles de filas sin asignar
    cuentan como error (FN) de la clase a la que pertenecen. Las clases sin píxeles ni en la
    predicción ni en el ground truth quedan fuera de los promedios.

    Parámetros:
        cm: Matriz de confusión.
        assignment: Asignación, normalmente `hungarian_assign(cm)`.
        class_split: Parámetro opcional, id de clase del ground truth → `thing` o `stuff`.
        class_names: Parámetro opcional, nombre de cada columna.

    Retorna:
        Objeto `EvalReport`

    Errores:
        `dynaseg.exceptions.DynaSegEmptyEvalError`: No hay píxeles evaluados.
    """
    total = cm.total
    if total == 0:
        raise DynaSegEmptyEvalError()

    counts = cm.counts
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    row_of = {col: row for row, col in assignment.mapping.items()}

    per_class: List[Union[float, None]] = []
    for col in range(counts.shape[1]):
        row = row_of.get(col)
        tp = int(counts[row, col]) if row is not None else 0
        predicted = int(row_sums[row]) if row is not None else 0
        union = predicted + int(col_sums[col]) - tp
        per_class.append(tp / union if union > 0 else None)

    things: List[Union[float, None]] = []
    stuff: List[Union[float, None]] = []
    if class_split:
        for gt_id, iou in zip(cm.gt_ids, per_class):
            kind = class_split.get(gt_id)
            if kind is None:
                continue
            (things if ClassKind(kind) == ClassKind.THING else stuff).append(iou)

    miou_all = _mean(per_class)
    return EvalReport(
        miou_all=miou_all if miou_all is not None else 0.0,
        miou_things=_mean(things),
        miou_stuff=_mean(stuff),
        pixel_acc=assignment.matched_count / total,
        per_class_iou=per_class,
        class_names=list(class_names) if class_names is not None else None,
    )


def score_pair(pred: LabelMap, gt: LabelMap, ignore_label: Union[int, None] = None) -> EvalReport:
    """Evalúa una predicción contra un único ground truth tratando cada segmento como entidad"""
    cm = confusion(pred, gt, ignore_label)
    return miou(cm, hungarian_assign(cm))


def _pick_variants(gt_variants: Sequence[LabelMap]) -> Tuple[int, int]:
    segments = [v.unique_count for v in gt_variants]
    fine = segments.index(max(segments))
    coarse = segments.index(min(segments))
    return fine, coarse


def bsd500_scores(
    pred: LabelMap,
    gt_variants: Sequence[LabelMap],
    ignore_label: Union[int, None] = None,
    source_id: str = "",
) -> BsdScores:
    """Estrategias de conteo de mIoU con varios ground truth por imagen

    ALL promedia todas las variantes, FINE usa la variante con más segmentos, COARSE la de
    menos (empates a la primera) y MEAN promedia las tres anteriores.

    Errores:
        `dynaseg.exceptions.DynaSegNoGroundTruthError`: No hay variantes.
    """
    if len(gt_variants) == 0:
        raise DynaSegNoGroundTruthError(source_id)

    scores = [score_pair(pred, gt, ignore_label).miou_all for gt in gt_variants]
    fine, coarse = _pick_variants(gt_variants)
    all_ = float(np.mean(scores))
    return BsdScores(
        all=all_,
        fine=scores[fine],
        coarse=scores[coarse],
        mean=(all_ + scores[fine] + scores[coarse]) / 3,
    )


def _score_image(
    item: Tuple[str, LabelMap, GroundTruth]
) -> Tuple[BsdScores, float]:
    source_id, pred, gt = item
    scores = bsd500_scores(pred, gt.variants, gt.ignore_label, source_id)
    pixel_acc = float(np.mean([score_pair(pred, v, gt.ignore_label).pixel_acc for v in gt.variants]))
    return scores, pixel_acc


def _split_missing(
    predictions: Mapping[str, LabelMap], ground_truths: Mapping[str, GroundTruth]
) -> Tuple[List[str], List[str]]:
    ids = sorted(ground_truths)
    present = [i for i in ids if i in predictions]
    missing = [i for i in ids if i not in predictions]
    for source_id in missing:
        logger.warning("Falta la predicción de %s", source_id)
    return present, missing


def evaluate_per_image(
    predictions: Mapping[str, LabelMap],
    ground_truths: Mapping[str, GroundTruth],
    strategy: Union[BsdStrategy, str] = BsdStrategy.ALL,
    jobs: int = 1,
) -> EvalReport:
    """Protocolo BSD500/PASCAL: cada segmento del ground truth es su propia entidad

    Cada imagen se asigna por separado; los puntajes por estrategia se promedian sobre las
    imágenes. `miou_all` es el puntaje de la estrategia elegida.

    Errores:
        `dynaseg.exceptions.DynaSegEmptyEvalError`: Ninguna imagen tiene predicción.
    """
    strategy = BsdStrategy(strategy)
    present, missing = _split_missing(predictions, ground_truths)
    if not present:
        raise DynaSegEmptyEvalError()

    items = [(i, predictions[i], ground_truths[i]) for i in present]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            scored = list(executor.map(_score_image, items))
    else:
        scored = [_score_image(item) for item in items]

    bsd = BsdScores(
        all=float(np.mean([s.all for s, _ in scored])),
        fine=float(np.mean([s.fine for s, _ in scored])),
        coarse=float(np.mean([s.coarse for s, _ in scored])),
        mean=float(np.mean([s.mean for s, _ in scored])),
    )
    return EvalReport(
        miou_all=bsd.get(strategy),
        pixel_acc=float(np.mean([acc for _, acc in scored])),
        bsd_strategy=strategy,
        bsd_scores=bsd,
        num_images=len(present),
        missing=missing,
    )


def evaluate_dataset(
    predictions: Mapping[str, LabelMap],
    ground_truths: Mapping[str, GroundTruth],
    class_table: Mapping[int, ClassInfo],
    ignore_label: Union[int, None] = None,
) -> EvalReport:
    """Protocolo COCO: una matriz de confusión acumulada sobre todo el dataset y una única asignación

    Errores:
        `dynaseg.exceptions.DynaSegEmptyEvalError`: Ninguna imagen tiene predicción o no hay píxeles.
    """
    present, missing = _split_missing(predictions, ground_truths)
    if not present:
        raise DynaSegEmptyEvalError()

    gt_ids = sorted(class_table)
    pred_ids = sorted(set().union(*(np.unique(predictions[i].labels).tolist() for i in present)))

    cm = None
    for source_id in present:
        gt = ground_truths[source_id]
        ignore = gt.ignore_label if ignore_label is None else ignore_label
        current = confusion(predictions[source_id], gt.variants[0], ignore, pred_ids=pred_ids, gt_ids=gt_ids)
        cm = current if cm is None else cm.merge(current)

    report = miou(
        cm,
        hungarian_assign(cm),
        class_split={i: class_table[i].kind for i in gt_ids},
        class_names=[class_table[i].name for i in gt_ids],
    )
    return report.model_copy(update={"num_images": len(present), "missing": missing})


def write_report(report: EvalReport, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))


def write_per_class_csv(report: EvalReport, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "name", "iou"])
        for index, iou in enumerate(report.per_class_iou):
            name = report.class_names[index] if report.class_names else ""
            writer.writerow([index, name, "" if iou is None else f"{iou:.6f}"])
