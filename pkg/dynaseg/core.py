import logging
import random
from typing import Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

logger = logging.getLogger(__name__)

# Varianza bajo la cual un canal se considera constante
DEGENERATE_VARIANCE = 1e-12


class ImageTensor(BaseModel):
    """Imagen H×W×C con valores en [0, 1]

    Parámetros:
        pixels: Arreglo numpy float32 de forma (H, W, C).
        source_id: Identificador de procedencia (ruta, id del dataset, etc...).

    El número de canales no se fuerza acá: los backbones validan que sea 3.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray
    source_id: str = ""

    @field_validator("pixels")
    @classmethod
    def check_pixels(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"se esperaba un arreglo H×W×C, se obtuvo forma {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"la imagen debe ser de al menos 2x2, se obtuvo {v.shape[:2]}")
        if v.shape[2] < 1:
            raise ValueError("la imagen no tiene canales")
        if not np.all(np.isfinite(v)):
            raise ValueError("la imagen contiene valores no finitos")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("los valores de la imagen deben estar en [0, 1]")
        return v

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])


class FeatureMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: torch.Tensor

    @property
    def p(self) -> int:
        return int(self.values.shape[-1])


class ResponseMap(BaseModel):
    """Respuesta del clasificador por píxel, tensor (H, W, q)

    `values` puede llevar grafo de autograd; las pérdidas la consumen directamente.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: torch.Tensor
    normalized: bool = False

    @field_validator("values")
    @classmethod
    def check_values(cls, v: torch.Tensor) -> torch.Tensor:
        if v.dim() != 3:
            raise ValueError(f"se esperaba un tensor H×W×q, se obtuvo forma {tuple(v.shape)}")
        return v

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def q(self) -> int:
        return int(self.values.shape[2])


class LabelMap(BaseModel):
    """Mapa H×W de etiquetas enteras

    Parámetros:
        labels: Arreglo numpy de enteros de forma (H, W).
        num_classes: Parámetro opcional, si se entrega todas las etiquetas deben estar en [0, num_classes).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labels: np.ndarray
    num_classes: Union[int, None] = None

    @field_validator("labels")
    @classmethod
    def check_labels(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim != 2:
            raise ValueError(f"se esperaba un arreglo H×W, se obtuvo forma {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"las etiquetas deben ser enteras, se obtuvo {v.dtype}")
        return v.astype(np.int64, copy=False)

    @field_validator("num_classes")
    @classmethod
    def check_num_classes(cls, v: Union[int, None]) -> Union[int, None]:
        if v is not None and v < 1:
            raise ValueError("num_classes debe ser positivo")
        return v

    @model_validator(mode="after")
    def check_range(self) -> "LabelMap":
        if self.num_classes is not None and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"etiquetas fuera de rango [0, {self.num_classes})")
        return self

    @property
    def unique_count(self) -> int:
        """Cantidad de etiquetas distintas presentes (q'), se recalcula en cada llamada"""
        return int(np.unique(self.labels).size)

    @property
    def shape(self):
        return self.labels.shape


def normalize_response(raw: ResponseMap) -> ResponseMap:
    """Normaliza cada canal a media cero y varianza unitaria sobre las posiciones H×W

    Usa la varianza poblacional (sesgada). Un canal de varianza nula queda en ceros.
    El grafo de autograd se conserva. La bandera `raw.normalized` no se verifica: aplicar
    la función a una respuesta ya normalizada la deja igual (idempotente, salvo redondeo).

    Parámetros:
        raw: Respuesta sin normalizar.

    Retorna:
        Objeto `ResponseMap` con `normalized=True`
    """
    values = raw.values
    mean = values.mean(dim=(0, 1), keepdim=True)
    centered = values - mean
    var = (centered * centered).mean(dim=(0, 1), keepdim=True)
    live = var > DEGENERATE_VARIANCE
    std = torch.sqrt(torch.where(live, var, torch.ones_like(var)))
    normalized = torch.where(live, centered / std, torch.zeros_like(centered))
    return ResponseMap(values=normalized, normalized=True)


def argmax_labels(resp: ResponseMap) -> LabelMap:
    """Asigna a cada píxel el canal de respuesta máxima (empates al menor índice)

    Las etiquetas se calculan sin gradiente. Se acepta cualquier respuesta: la bandera
    `resp.normalized` no se verifica y quien llama decide si normaliza antes.
    """
    scores = resp.values.detach().cpu().numpy()
    return LabelMap(labels=np.argmax(scores, axis=-1), num_classes=resp.q)


def seed_all(seed: int) -> None:
    """Fija las semillas de `random`, numpy y torch"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False
    logger.debug("Semillas fijadas en %d", seed)
