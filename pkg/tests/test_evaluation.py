import csv
import itertools
import json

import numpy as np
import pytest

from dynaseg.core import LabelMap
from dynaseg.datasets import load_class_table
from dynaseg.evaluation import (
    bsd500_scores,
    confusion,
    evaluate_dataset,
    evaluate_per_image,
    hungarian_assign,
    miou,
    score_pair,
    write_per_class_csv,
    write_report,
)
from dynaseg.exceptions import (
    DynaSegEmptyEvalError,
    DynaSegInvalidSpecError,
    DynaSegNoGroundTruthError,
    DynaSegShapeMismatchError,
)
from dynaseg.schemas.datasets import GroundTruth
from dynaseg.schemas.evaluation import Assignment, BsdStrategy, ConfusionMatrix


def _labels(rows):
    return LabelMap(labels=np.asarray(rows, dtype=np.int64))


def _brute_force(counts: np.ndarray):
    """Asignación óptima por búsqueda exhaustiva; las filas sin asignar se marcan con G"""
    n_rows, n_cols = counts.shape
    best = None
    if n_rows <= n_cols:
        candidates = (list(cols) for cols in itertools.permutations(range(n_cols), n_rows))
    else:
        def unmapped_rows():
            for rows in itertools.permutations(range(n_rows), n_cols):
                seq = [n_cols] * n_rows
                for col, row in enumerate(rows):
                    seq[row] = col
                yield seq

        candidates = unmapped_rows()

    for seq in candidates:
        value = sum(int(counts[r, c]) for r, c in enumerate(seq) if c < n_cols)
        key = (-value, seq)
        if best is None or key < best:
            best = key
    mapping = {r: c for r, c in enumerate(best[1]) if c < n_cols}
    return mapping, -best[0]


def test_confusion_perfect_prediction_is_diagonal():
    gt = _labels([[0, 0, 1], [1, 1, 0]])
    cm = confusion(gt, gt)

    assert cm.counts.tolist() == [[3, 0], [0, 3]]
    assert cm.total == 6


def test_confusion_constant_prediction():
    pred = _labels([[0, 0], [0, 0]])
    gt = _labels([[0, 1], [0, 1]])

    assert confusion(pred, gt).counts.tolist() == [[2, 2]]


def test_confusion_ignore_label():
    pred = _labels([[0, 1], [1, 1]])
    gt = _labels([[0, 255], [1, 255]])
    cm = confusion(pred, gt, ignore_label=255)

    assert cm.total == 2
    assert cm.gt_ids == [0, 1]


def test_confusion_errors():
    with pytest.raises(DynaSegShapeMismatchError):
        confusion(_labels([[0, 1]]), _labels([[0], [1]]))
    with pytest.raises(DynaSegInvalidSpecError):
        confusion(_labels([[0, 1]]), _labels([[0, 5]]), gt_ids=[0, 1])


def test_confusion_declared_ids_and_merge():
    a = confusion(_labels([[0, 2]]), _labels([[1, 1]]), pred_ids=[0, 1, 2], gt_ids=[0, 1])
    b = confusion(_labels([[1, 1]]), _labels([[0, 1]]), pred_ids=[0, 1, 2], gt_ids=[0, 1])
    merged = a.merge(b)

    assert merged.counts.tolist() == [[0, 1], [1, 1], [0, 1]]
    assert merged.total == 4


def test_hungarian_examples():
    a = hungarian_assign(ConfusionMatrix(counts=[[5, 1], [2, 7]]))
    assert a.mapping == {0: 0, 1: 1}
    assert a.matched_count == 12

    b = hungarian_assign(ConfusionMatrix(counts=[[1, 9], [8, 2]]))
    assert b.mapping == {0: 1, 1: 0}
    assert b.matched_count == 17

    c = hungarian_assign(ConfusionMatrix(counts=np.eye(4, dtype=np.int64) * 3))
    assert c.mapping == {0: 0, 1: 1, 2: 2, 3: 3}


def test_hungarian_tie_break_is_lexicographic():
    a = hungarian_assign(ConfusionMatrix(counts=[[1, 1], [1, 1]]))
    assert a.mapping == {0: 0, 1: 1}

    b = hungarian_assign(ConfusionMatrix(counts=[[0, 0], [0, 0], [5, 5]]))
    assert b.mapping == {0: 0, 2: 1}


def test_hungarian_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
        counts = rng.integers(0, 6, size=shape)
        assignment = hungarian_assign(ConfusionMatrix(counts=counts))
        mapping, value = _brute_force(counts)

        assert assignment.matched_count == value
        assert assignment.mapping == mapping
        assert len(assignment.mapping) == min(shape)
        assert len(set(assignment.mapping.values())) == len(assignment.mapping)


def test_miou_hand_example():
    cm = ConfusionMatrix(counts=[[5, 1], [2, 7]])
    report = miou(cm, Assignment(mapping={0: 0, 1: 1}, matched_count=12))

    assert report.per_class_iou == pytest.approx([5 / 8, 7 / 10])
    assert report.miou_all == pytest.approx(0.6625)
    assert report.pixel_acc == pytest.approx(12 / 15)


def test_miou_perfect_and_empty():
    gt = _labels([[0, 1, 2], [2, 1, 0]])
    report = score_pair(gt, gt)
    assert report.miou_all == 1.0
    assert report.pixel_acc == 1.0

    with pytest.raises(DynaSegEmptyEvalError):
        score_pair(_labels([[0, 1]]), _labels([[255, 255]]), ignore_label=255)


def test_miou_excludes_absent_classes_and_splits_kinds():
    cm = ConfusionMatrix(counts=[[4, 0, 0], [0, 2, 0]], gt_ids=[0, 1, 2])
    report = miou(cm, hungarian_assign(cm), class_split={0: "thing", 1: "stuff", 2: "stuff"})

    assert report.per_class_iou == [1.0, 1.0, None]
    assert report.miou_all == 1.0
    assert report.miou_things == 1.0
    assert report.miou_stuff == 1.0


def test_unmapped_clusters_count_as_errors():
    pred = _labels([[0, 0, 1, 2]])
    gt = _labels([[0, 0, 0, 1]])
    report = score_pair(pred, gt)

    assert report.pixel_acc == pytest.approx(3 / 4)
    assert report.per_class_iou == pytest.approx([2 / 3, 1.0])


def test_scores_invariant_under_label_permutation():
    rng = np.random.default_rng(5)
    gt = rng.integers(0, 4, size=(20, 20))
    pred = gt.copy()
    noise = rng.random(gt.shape) < 0.15
    pred[noise] = rng.integers(0, 4, size=int(noise.sum()))
    permuted = np.array([3, 0, 2, 1])[pred]

    a = score_pair(_labels(pred), _labels(gt))
    b = score_pair(_labels(permuted), _labels(gt))
    assert a.miou_all == pytest.approx(b.miou_all)
    assert a.pixel_acc == pytest.approx(b.pixel_acc)
    assert score_pair(_labels(pred), _labels(gt)) == a


def test_bsd500_single_variant_strategies_agree():
    gt = _labels([[0, 0, 1, 1]])
    scores = bsd500_scores(_labels([[0, 1, 1, 1]]), [gt])

    assert scores.all == scores.fine == scores.coarse == scores.mean


def test_bsd500_variant_selection():
    stripes = _labels([[0, 1, 2, 3]] * 4)
    halves = _labels([[0] * 4] * 2 + [[1] * 4] * 2)
    scores = bsd500_scores(stripes, [halves, stripes])

    assert scores.fine == 1.0
    assert scores.coarse == pytest.approx(0.2)
    assert scores.all == pytest.approx(0.6)
    assert scores.mean == pytest.approx((0.6 + 1.0 + 0.2) / 3)
    assert scores.get(BsdStrategy.COARSE) == scores.coarse


def test_bsd500_without_ground_truth():
    with pytest.raises(DynaSegNoGroundTruthError):
        bsd500_scores(_labels([[0, 1]]), [], source_id="x")


def test_evaluate_per_image_reports_missing():
    gt = GroundTruth(variants=[_labels([[0, 1], [0, 1]])])
    report = evaluate_per_image({"a": _labels([[0, 1], [0, 1]])}, {"a": gt, "b": gt}, jobs=2)

    assert report.miou_all == 1.0
    assert report.num_images == 1
    assert report.missing == ["b"]
    assert report.bsd_strategy == BsdStrategy.ALL

    with pytest.raises(DynaSegEmptyEvalError):
        evaluate_per_image({}, {"a": gt})


def test_evaluate_dataset_uses_one_assignment():
    table = load_class_table()
    gt_a = GroundTruth(variants=[_labels([[0, 0, 12, 12]])], ignore_label=255)
    gt_b = GroundTruth(variants=[_labels([[12, 255, 0, 0]])], ignore_label=255)
    predictions = {"a": _labels([[7, 7, 3, 3]]), "b": _labels([[3, 3, 7, 7]])}

    report = evaluate_dataset(predictions, {"a": gt_a, "b": gt_b}, table)

    assert report.miou_all == 1.0
    assert report.miou_things == 1.0
    assert report.miou_stuff == 1.0
    assert report.pixel_acc == 1.0
    assert len(report.per_class_iou) == 27
    assert report.class_names[12] == "ceiling"
    assert report.num_images == 2


def test_report_files(tmp_path):
    cm = ConfusionMatrix(counts=[[5, 1], [2, 7]])
    report = miou(cm, hungarian_assign(cm), class_names=["a", "b"])
    write_report(report, tmp_path / "report.json")
    write_per_class_csv(report, tmp_path / "per_class.csv")

    data = json.loads((tmp_path / "report.json").read_text())
    assert data["miou_all"] == pytest.approx(0.6625)

    with open(tmp_path / "per_class.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [row["name"] for row in rows] == ["a", "b"]
    assert float(rows[0]["iou"]) == pytest.approx(0.625)
