from enum import Enum
from typing import Any, Dict, List, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class BsdStrategy(str, Enum):
    ALL = "all"
    FINE = "fine"
    COARSE = "coarse"
    MEAN = "mean"


class ClassKind(str, Enum):
    THING = "thing"
    STUFF = "stuff"


class ConfusionMatrix(BaseModel):
    """Conteos P×G (etiquetas predichas × clases del ground truth)

    Parámetros:
        counts: Matriz de enteros no negativos.
        pred_ids: Parámetro opcional, etiqueta original de cada fila (por defecto 0..P-1).
        gt_ids: Parámetro opcional, clase original de cada columna (por defecto 0..G-1).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray
    pred_ids: List[int] = []
    gt_ids: List[int] = []

    @model_validator(mode="before")
    @classmethod
    def fill_ids(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "counts" not in data:
            return data

        data = dict(data)
        shape = np.shape(data["counts"])
        if len(shape) == 2:
            if not data.get("pred_ids"):
                data["pred_ids"] = list(range(shape[0]))
            if not data.get("gt_ids"):
                data["gt_ids"] = list(range(shape[1]))
        return data

    @field_validator("counts")
    @classmethod
    def check_counts(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.int64)
        if v.ndim != 2:
            raise ValueError("la matriz de confusión debe ser 2D")
        if v.size and v.min() < 0:
            raise ValueError("la matriz de confusión no admite conteos negativos")
        return v

    @model_validator(mode="after")
    def check_ids(self) -> "ConfusionMatrix":
        if len(self.pred_ids) != self.counts.shape[0] or len(self.gt_ids) != self.counts.shape[1]:
            raise ValueError("pred_ids y gt_ids deben coincidir con la forma de counts")
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Suma dos matrices con las mismas filas y columnas"""
        if self.pred_ids != other.pred_ids or self.gt_ids != other.gt_ids:
            raise ValueError("las matrices de confusión no comparten etiquetas")
        return ConfusionMatrix(
            counts=self.counts + other.counts, pred_ids=self.pred_ids, gt_ids=self.gt_ids
        )


class Assignment(BaseModel):
    """Asignación inyectiva fila → columna (índices) de una matriz de confusión"""

    mapping: Dict[int, int]
    matched_count: int


class BsdScores(BaseModel):
    all: float
    fine: float
    coarse: float
    mean: float

    def get(self, strategy: BsdStrategy) -> float:
        return float(getattr(self, BsdStrategy(strategy).value))


class EvalReport(BaseModel):
    """Resultado de una evaluación

    `per_class_iou` sigue el orden de columnas de la matriz de confusión; las clases
    ausentes tanto en la predicción como en el ground truth quedan en `None`.
    """

    miou_all: float
    miou_things: Union[float, None] = None
    miou_stuff: Union[float, None] = None
    pixel_acc: float
    per_class_iou: List[Union[float, None]] = []
    class_names: Union[List[str], None] = None
    bsd_strategy: Union[BsdStrategy, None] = None
    bsd_scores: Union[BsdScores, None] = None
    num_images: int = 1
    missing: List[str] = []
