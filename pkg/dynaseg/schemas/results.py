from enum import Enum
from typing import List, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dynaseg.core import LabelMap


class StopReason(str, Enum):
    MAX_ITERS = "max_iters"
    THRESHOLD = "threshold"


class GateDecision(str, Enum):
    CONTINUE = "continue"
    STOP_THRESHOLD = "stop_threshold"
    STOP_MAX_ITERS = "stop_max_iters"


class LossBreakdown(BaseModel):
    """Componentes de la pérdida L = L_sim + μ·L_con

    `objective` contiene el tensor escalar con grafo para `backward`, no se serializa.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sim: float
    con: float
    mu: float
    total: float
    objective: Union[torch.Tensor, None] = Field(default=None, exclude=True, repr=False)


class IterationRecord(BaseModel):
    iter: int
    mu: float
    loss_sim: float
    loss_con: float
    loss_total: float
    q_prime: int


class TrainState(BaseModel):
    iter: int = 0
    mu: Union[float, None] = None
    loss_sim: Union[float, None] = None
    loss_con: Union[float, None] = None
    loss_total: Union[float, None] = None
    q_history: List[int] = []
    history: List[IterationRecord] = []
    stopped_by: Union[StopReason, None] = None

    def record(self, entry: IterationRecord) -> None:
        self.history.append(entry)
        self.q_history.append(entry.q_prime)
        self.iter = len(self.history)
        self.mu = entry.mu
        self.loss_sim = entry.loss_sim
        self.loss_con = entry.loss_con
        self.loss_total = entry.loss_total


class SilhouetteResult(BaseModel):
    candidate_ks: List[int]
    scores: List[float]
    opt_nC: int

    @model_validator(mode="after")
    def check_consistency(self) -> "SilhouetteResult":
        if len(self.scores) != len(self.candidate_ks):
            raise ValueError("scores y candidate_ks deben tener el mismo largo")
        if self.opt_nC not in self.candidate_ks:
            raise ValueError("opt_nC debe ser uno de los candidatos")
        return self


class SegmentationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source_id: str
    final_labels: LabelMap
    state: TrainState
    silhouette: Union[SilhouetteResult, None] = None
    threshold: int
    wall_time: float


class GateStats(BaseModel):
    """Umbral de la primera iteración frente a la cantidad de segmentos del ground truth

    Parámetros:
        first_q: q' de la primera iteración.
        opt_nC: Resultado del silhouette, `None` si ningún candidato fue válido.
        threshold: Umbral efectivo (opt_nC acotado por first_q, o el fijo).
        fixed_threshold: Umbral fijo de la configuración.
        gt_segments: Promedio de segmentos entre las variantes del ground truth.
    """

    source_id: str
    first_q: int
    opt_nC: Union[int, None] = None
    threshold: int
    fixed_threshold: int
    gt_segments: Union[float, None] = None


class SegmentationFailure(BaseModel):
    index: int
    source_id: str
    error: str
    message: str


class BatchOutcome(BaseModel):
    """Resultados de un lote, en el mismo orden de entrada y sin las imágenes que fallaron"""

    results: List[SegmentationResult] = []
    failures: List[SegmentationFailure] = []

    @property
    def ok(self) -> bool:
        return len(self.failures) == 0
