from enum import Enum
from typing import Any, List, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_ALPHA = {"fsf": 15.0, "scf": 50.0}
DEFAULT_FIXED_MU = 5.0
DEFAULT_HOMOGENEOUS_FRACTION = 0.4


class ScheduleKind(str, Enum):
    FSF = "fsf"
    SCF = "scf"
    FIXED = "fixed"


class BackboneKind(str, Enum):
    CNN = "cnn"
    RESNET_FPN = "resnet_fpn"


class UpsampleMode(str, Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class LossReduction(str, Enum):
    MEAN = "mean"
    SUM = "sum"


class FeatureSource(str, Enum):
    RESPONSE = "response"
    COLOR = "color"


class TrainMode(str, Enum):
    PER_IMAGE = "per_image"
    DATASET = "dataset"


def _split_csv(v):
    if isinstance(v, str):
        return [int(part) for part in v.split(",") if part.strip()]
    return v


class MuSchedule(BaseModel):
    """Regla para calcular el peso de balance μ según el número de clusters q'

    Parámetros:
        kind: `fsf` (μ = q'/α), `scf` (μ = α/q') o `fixed` (μ constante).
        alpha: Constante α, si no se entrega se usa 15 para FSF y 50 para SCF.
        mu: Valor de μ para el modo `fixed` (por defecto 5).
    """

    model_config = ConfigDict(frozen=True)

    kind: ScheduleKind = ScheduleKind.FSF
    alpha: Union[float, None] = Field(default=None, gt=0)
    mu: Union[float, None] = Field(default=None, ge=0)

    @model_validator(mode="before")
    @classmethod
    def fill_defaults(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data

        data = dict(data)
        kind = ScheduleKind(data.get("kind") or ScheduleKind.FSF)
        if data.get("alpha") is None and kind != ScheduleKind.FIXED:
            data["alpha"] = DEFAULT_ALPHA[kind.value]
        if data.get("mu") is None and kind == ScheduleKind.FIXED:
            data["mu"] = DEFAULT_FIXED_MU
        return data


class CnnBackboneSpec(BaseModel):
    """M componentes conv → ReLU → batch-norm, stride 1 y sin pooling"""

    model_config = ConfigDict(frozen=True)

    num_components: int = 3
    channels: int = 100
    in_channels: int = 3
    kernel_sizes: Union[List[int], None] = None

    @field_validator("kernel_sizes", mode="before")
    @classmethod
    def parse_kernel_sizes(cls, v):
        return _split_csv(v)

    def resolved_kernel_sizes(self) -> List[int]:
        if self.kernel_sizes is None:
            return [3] * max(self.num_components, 0)
        return list(self.kernel_sizes)


class ResNetFpnSpec(BaseModel):
    """ResNet-18 sin GAP/FC con un decoder FPN de ancho fijo"""

    model_config = ConfigDict(frozen=True)

    depth: int = 18
    pyramid_channels: int = 256
    out_channels: int = 100
    weights_path: Union[str, None] = None
    allow_random_init: bool = False
    freeze_trunk: bool = False
    upsample: UpsampleMode = UpsampleMode.BILINEAR


class BackboneConfig(BaseModel):
    kind: BackboneKind = BackboneKind.CNN
    components: int = Field(default=3, ge=1)
    kernel_sizes: Union[List[int], None] = None
    p: int = Field(default=100, ge=1)
    q: int = Field(default=100, ge=1)
    pyramid_channels: int = Field(default=256, ge=1)
    weights_path: Union[str, None] = None
    allow_random_init: bool = False
    freeze_trunk: bool = False
    upsample: UpsampleMode = UpsampleMode.BILINEAR
    head_batch_norm: bool = True

    @field_validator("kernel_sizes", mode="before")
    @classmethod
    def parse_kernel_sizes(cls, v):
        return _split_csv(v)

    def cnn_spec(self) -> CnnBackboneSpec:
        return CnnBackboneSpec(
            num_components=self.components,
            channels=self.p,
            kernel_sizes=self.kernel_sizes,
        )

    def resnet_spec(self) -> ResNetFpnSpec:
        return ResNetFpnSpec(
            pyramid_channels=self.pyramid_channels,
            out_channels=self.q,
            weights_path=self.weights_path,
            allow_random_init=self.allow_random_init,
            freeze_trunk=self.freeze_trunk,
            upsample=self.upsample,
        )


class OptimizerSpec(BaseModel):
    """SGD con momentum y sin scheduler"""

    lr: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)


class LossConfig(BaseModel):
    reduction: LossReduction = LossReduction.MEAN


class SilhouetteConfig(BaseModel):
    """Fase de silhouette score

    Parámetros:
        enabled: Si es falso, el umbral de q' es el valor fijo `threshold`.
        sample_size: Máximo de píxeles muestreados para k-means y silhouette.
        k_min, k_max: Rango de candidatos (inclusivo).
        n_init: Reinicios de k-means.
        metric: Métrica de distancia del silhouette.
        feature_source: `response` usa la respuesta normalizada de la primera iteración, `color` el RGB.
        homogeneous_fraction: Fracción de píxeles de menor variación local entre los que se muestrea
            (1 usa todos los píxeles).
        threshold: Umbral fijo de q' cuando `enabled` es falso.
    """

    enabled: bool = True
    sample_size: int = Field(default=2000, ge=2)
    k_min: int = Field(default=2, ge=2)
    k_max: int = Field(default=20, ge=2)
    n_init: int = Field(default=10, ge=1)
    metric: str = "euclidean"
    feature_source: FeatureSource = FeatureSource.RESPONSE
    homogeneous_fraction: float = Field(default=DEFAULT_HOMOGENEOUS_FRACTION, gt=0, le=1)
    threshold: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def check_range(self) -> "SilhouetteConfig":
        if self.k_max < self.k_min:
            raise ValueError("silhouette.k_max debe ser mayor o igual a silhouette.k_min")
        return self

    def candidate_ks(self) -> List[int]:
        return list(range(self.k_min, self.k_max + 1))


class TrainConfig(BaseModel):
    mode: TrainMode = TrainMode.PER_IMAGE
    max_iters: int = Field(default=64, ge=1)
    log_path: Union[str, None] = None
    num_threads: Union[int, None] = Field(default=None, ge=1)
    resize: int = Field(default=320, ge=2)


class RunConfig(BaseModel):
    """Configuración completa de una corrida

    Los valores por defecto corresponden al setup experimental publicado:
    lr=0.1, momentum=0.9, weight_decay=1e-4, p=q=100, M=3, α=15 (FSF) o 50 (SCF).
    """

    schedule: MuSchedule = MuSchedule()
    backbone: BackboneConfig = BackboneConfig()
    optimizer: OptimizerSpec = OptimizerSpec()
    loss: LossConfig = LossConfig()
    silhouette: SilhouetteConfig = SilhouetteConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0


class SyntheticSpec(BaseModel):
    """Corpus sintético de franjas de color constante con ground truth exacto"""

    num_images: int = Field(default=5, ge=1)
    block_counts: List[int] = [3]
    size: int = Field(default=64, ge=2)
    noise: float = Field(default=0.02, ge=0)
    seed: int = 0

    @field_validator("block_counts", mode="before")
    @classmethod
    def parse_block_counts(cls, v):
        return _split_csv(v)

    @field_validator("block_counts")
    @classmethod
    def check_blocks(cls, v: List[int]) -> List[int]:
        if not v or any(b < 1 for b in v):
            raise ValueError("block_counts debe contener enteros positivos")
        return v
