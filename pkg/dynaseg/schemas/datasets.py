from enum import Enum
from typing import Dict, List, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from dynaseg.core import LabelMap
from dynaseg.schemas.evaluation import ClassKind

COCO_NUM_CLASSES = 27
COCO_NUM_STUFF = 15
COCO_NUM_THINGS = 12


class DatasetName(str, Enum):
    BSD500 = "bsd500"
    VOC2012 = "voc2012"
    COCO_STUFF = "coco_stuff"


class ClassInfo(BaseModel):
    name: str
    kind: ClassKind


class DatasetManifest(BaseModel):
    """Ítems de un split de un dataset, en orden determinístico

    Parámetros:
        name: Dataset.
        root: Raíz del dataset en disco.
        split: Split (`test`, `trainval`, `val`, ...).
        item_ids: Identificadores ordenados.
        class_table: Tabla id → clase; vacía cuando cada segmento es su propia entidad.
        fine_to_coarse: Tabla de fusión de clases finas a gruesas (solo COCO-Stuff).
        ignore_label: Etiqueta excluida de la evaluación.
    """

    name: DatasetName
    root: str
    split: str
    item_ids: List[str]
    class_table: Dict[int, ClassInfo] = {}
    fine_to_coarse: Dict[int, int] = {}
    ignore_label: Union[int, None] = None

    @model_validator(mode="after")
    def check_class_table(self) -> "DatasetManifest":
        if self.item_ids != sorted(self.item_ids):
            raise ValueError("item_ids debe estar ordenado")
        if self.name != DatasetName.COCO_STUFF:
            return self

        kinds = [info.kind for info in self.class_table.values()]
        if (
            len(self.class_table) != COCO_NUM_CLASSES
            or kinds.count(ClassKind.STUFF) != COCO_NUM_STUFF
            or kinds.count(ClassKind.THING) != COCO_NUM_THINGS
        ):
            raise ValueError(
                f"la tabla de clases de COCO-Stuff debe tener {COCO_NUM_CLASSES} clases "
                f"({COCO_NUM_STUFF} stuff y {COCO_NUM_THINGS} things)"
            )
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_table)


class GroundTruth(BaseModel):
    """Anotaciones de una imagen: BSD500 trae varias variantes, el resto exactamente una"""

    variants: List[LabelMap] = Field(min_length=1)
    ignore_label: Union[int, None] = None

    def segment_counts(self) -> List[int]:
        """Cantidad de segmentos de cada variante, sin contar `ignore_label`"""
        counts = []
        for variant in self.variants:
            present = np.unique(variant.labels)
            if self.ignore_label is not None:
                present = present[present != self.ignore_label]
            counts.append(int(present.size))
        return counts
