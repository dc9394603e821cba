import hashlib
import logging
import os
from typing import List, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, field_validator

from dynaseg.core import ImageTensor, LabelMap
from dynaseg.exceptions import DynaSegDecodeError

logger = logging.getLogger(__name__)

PALETTE_SIZE = 256
PathLike = Union[str, os.PathLike]


class PaletteSpec(BaseModel):
    """Tabla de colores fija: el color de cada etiqueta sale de un hash de su id"""

    model_config = ConfigDict(frozen=True)

    colors: List[Tuple[int, int, int]]

    @field_validator("colors")
    @classmethod
    def check_size(cls, v):
        if len(v) != PALETTE_SIZE:
            raise ValueError(f"la paleta debe tener {PALETTE_SIZE} colores")
        return v

    def color(self, label: int) -> Tuple[int, int, int]:
        return self.colors[label % PALETTE_SIZE]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.uint8)


def make_palette() -> PaletteSpec:
    colors = []
    for label in range(PALETTE_SIZE):
        digest = hashlib.md5(f"dynaseg-label-{label}".encode()).digest()
        colors.append((digest[0], digest[1], digest[2]))
    return PaletteSpec(colors=colors)


def read_image(path: PathLike, source_id: Union[str, None] = None) -> ImageTensor:
    """Lee una imagen RGB y la escala a [0, 1]

    Errores:
        `dynaseg.exceptions.DynaSegDecodeError`: El archivo no existe o no es una imagen válida.
    """
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DynaSegDecodeError(str(path), str(e))

    if source_id is None:
        source_id = os.path.splitext(os.path.basename(str(path)))[0]
    return ImageTensor(pixels=pixels, source_id=source_id)


def write_label_map(labels: LabelMap, path: PathLike) -> None:
    """Escribe el mapa de etiquetas crudo en un PNG de un canal (sin pérdida)

    Usa 8 bits si todas las etiquetas caben, si no 16 bits.
    """
    data = labels.labels
    if data.size and (data.min() < 0 or data.max() > np.iinfo(np.uint16).max):
        raise ValueError("las etiquetas no caben en un PNG de 16 bits")

    if data.size == 0 or data.max() < 256:
        Image.fromarray(data.astype(np.uint8)).save(path)
    else:
        Image.fromarray(data.astype(np.uint16)).save(path)


def read_label_map(path: PathLike) -> LabelMap:
    """Lee un mapa de etiquetas escrito por `write_label_map` o un PNG indexado

    Errores:
        `dynaseg.exceptions.DynaSegDecodeError`: El archivo no existe o no es decodificable.
    """
    try:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA"):
                raise ValueError(f"se esperaba una imagen de un canal, se obtuvo modo {img.mode}")
            data = np.asarray(img)
    except (OSError, ValueError) as e:
        raise DynaSegDecodeError(str(path), str(e))
    return LabelMap(labels=data.astype(np.int64))


def colorize(labels: LabelMap, palette: Union[PaletteSpec, None] = None) -> np.ndarray:
    palette = palette or make_palette()
    return palette.as_array()[labels.labels % PALETTE_SIZE]


def write_overlay(
    image: ImageTensor,
    labels: LabelMap,
    path: PathLike,
    alpha: float = 0.5,
    palette: Union[PaletteSpec, None] = None,
) -> None:
    """Mezcla la imagen con el color de cada etiqueta (mismo color = mismo cluster)"""
    colors = colorize(labels, palette).astype(np.float32) / 255.0
    blended = (1.0 - alpha) * image.pixels[..., :3] + alpha * colors
    Image.fromarray(np.clip(blended * 255.0 + 0.5, 0, 255).astype(np.uint8)).save(path)
