import logging
import os
from importlib import resources
from typing import Dict, List, Tuple, Union

import numpy as np
import scipy.io
from PIL import Image

from dynaseg.core import ImageTensor, LabelMap
from dynaseg.exceptions import (
    DynaSegCorruptLayoutError,
    DynaSegDecodeError,
    DynaSegInvalidSpecError,
    DynaSegMissingRootError,
)
from dynaseg.io import read_image
from dynaseg.schemas.config import SyntheticSpec
from dynaseg.schemas.datasets import ClassInfo, DatasetManifest, DatasetName, GroundTruth
from dynaseg.schemas.evaluation import ClassKind

logger = logging.getLogger(__name__)

VOID_LABEL = 255

# Tamaños publicados de cada split
EXPECTED_SIZES = {
    (DatasetName.BSD500, "test"): 200,
    (DatasetName.BSD500, "train"): 200,
    (DatasetName.BSD500, "val"): 100,
    (DatasetName.VOC2012, "trainval"): 2913,
    (DatasetName.VOC2012, "train"): 1464,
    (DatasetName.VOC2012, "val"): 1449,
    (DatasetName.COCO_STUFF, "val"): 2175,
}

# Colores bien separados para el corpus sintético
SYNTHETIC_COLORS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.20),
    (0.15, 0.20, 0.90),
    (0.95, 0.90, 0.10),
    (0.80, 0.20, 0.85),
    (0.10, 0.85, 0.90),
    (0.50, 0.50, 0.50),
    (0.05, 0.05, 0.05),
)


def _data_lines(filename: str) -> List[List[str]]:
    text = resources.files("dynaseg").joinpath("data", filename).read_text(encoding="utf-8")
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    return rows


def load_class_table() -> Dict[int, ClassInfo]:
    """Tabla de las 27 clases gruesas de COCO-Stuff (12 things, 15 stuff)"""
    return {int(i): ClassInfo(name=name, kind=ClassKind(kind)) for i, kind, name in _data_lines("cocostuff27_classes.txt")}


def load_fine_to_coarse() -> Dict[int, int]:
    return {int(fine): int(coarse) for fine, coarse in _data_lines("cocostuff27_fine_to_coarse.txt")}


def read_id_list(path: Union[str, os.PathLike]) -> List[str]:
    with open(path, encoding="utf-8") as f:
        return sorted({line.strip() for line in f if line.strip()})


def _bsd_dirs(root: str, split: str) -> Tuple[str, str]:
    base = os.path.join(root, "data") if os.path.isdir(os.path.join(root, "data", "images")) else root
    return os.path.join(base, "images", split), os.path.join(base, "groundTruth", split)


def _voc_base(root: str) -> str:
    nested = os.path.join(root, "VOCdevkit", "VOC2012")
    return nested if os.path.isdir(nested) else root


def _coco_dirs(root: str, split: str) -> Tuple[str, str]:
    return os.path.join(root, "images", f"{split}2017"), os.path.join(root, "annotations", f"{split}2017")


def _stems(directory: str, extension: str) -> List[str]:
    return sorted(
        os.path.splitext(name)[0] for name in os.listdir(directory) if name.lower().endswith(extension)
    )


def check_layout(name: Union[DatasetName, str], root: str, split: str) -> List[str]:
    """Revisa la estructura en disco de un dataset

    Retorna:
        Lista de problemas encontrados (vacía si la estructura es válida)

    Errores:
        `dynaseg.exceptions.DynaSegMissingRootError`: La raíz no existe.
    """
    name = DatasetName(name)
    if not os.path.isdir(root):
        raise DynaSegMissingRootError(root)

    problems: List[str] = []
    if name == DatasetName.BSD500:
        images, gts = _bsd_dirs(root, split)
        required = [images, gts]
    elif name == DatasetName.VOC2012:
        base = _voc_base(root)
        required = [
            os.path.join(base, "JPEGImages"),
            os.path.join(base, "SegmentationClass"),
            os.path.join(base, "ImageSets", "Segmentation", f"{split}.txt"),
        ]
    else:
        required = list(_coco_dirs(root, split))

    for path in required:
        if not os.path.exists(path):
            problems.append(f"falta {path}")
    if problems:
        return problems

    if name == DatasetName.BSD500:
        images, gts = _bsd_dirs(root, split)
        missing = sorted(set(_stems(images, ".jpg")) - set(_stems(gts, ".mat")))
        problems.extend(f"la imagen {i} no tiene groundTruth .mat" for i in missing)
    return problems


def load_manifest(
    name: Union[DatasetName, str],
    root: str,
    split: str,
    id_list: Union[str, None] = None,
) -> DatasetManifest:
    """Construye el manifiesto de un split

    Parámetros:
        name: `bsd500`, `voc2012` o `coco_stuff`.
        root: Raíz del dataset.
        split: Split a cargar.
        id_list: Parámetro opcional, archivo con un id por línea que fija el subconjunto (p. ej. el
            subconjunto curado de COCO-Stuff). Para COCO se usa `curated/{split}2017.txt` si existe.

    Retorna:
        Objeto `DatasetManifest` con los ids ordenados

    Errores:
        `dynaseg.exceptions.DynaSegMissingRootError`: La raíz no existe.
        `dynaseg.exceptions.DynaSegCorruptLayoutError`: La estructura no es la esperada.
    """
    name = DatasetName(name)
    problems = check_layout(name, root, split)
    if problems:
        raise DynaSegCorruptLayoutError(root, "; ".join(problems[:5]))

    class_table: Dict[int, ClassInfo] = {}
    fine_to_coarse: Dict[int, int] = {}
    ignore_label = None
    if name == DatasetName.BSD500:
        ids = _stems(_bsd_dirs(root, split)[0], ".jpg")
    elif name == DatasetName.VOC2012:
        ids = read_id_list(os.path.join(_voc_base(root), "ImageSets", "Segmentation", f"{split}.txt"))
        ignore_label = VOID_LABEL
    else:
        curated = os.path.join(root, "curated", f"{split}2017.txt")
        if id_list is None and os.path.isfile(curated):
            id_list = curated
        ids = _stems(_coco_dirs(root, split)[1], ".png")
        class_table = load_class_table()
        fine_to_coarse = load_fine_to_coarse()
        ignore_label = VOID_LABEL

    if id_list is not None:
        pinned = read_id_list(id_list)
        if name == DatasetName.COCO_STUFF:
            absent = sorted(set(pinned) - set(ids))
            if absent:
                raise DynaSegCorruptLayoutError(root, f"{len(absent)} ids de la lista no tienen anotación (p. ej. {absent[0]})")
        ids = pinned

    expected = EXPECTED_SIZES.get((name, split))
    if expected is not None and expected != len(ids):
        logger.warning("%s/%s tiene %d ítems, se esperaban %d", name.value, split, len(ids), expected)

    return DatasetManifest(
        name=name,
        root=root,
        split=split,
        item_ids=ids,
        class_table=class_table,
        fine_to_coarse=fine_to_coarse,
        ignore_label=ignore_label,
    )


def _dense(labels: np.ndarray, ignore_label: Union[int, None]) -> np.ndarray:
    """Renumera las etiquetas a 0..K-1 conservando `ignore_label`"""
    out = np.empty(labels.shape, dtype=np.int64)
    keep = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    _, inverse = np.unique(labels[keep], return_inverse=True)
    out[keep] = inverse
    if ignore_label is not None:
        out[~keep] = ignore_label
    return out


def _read_png_labels(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img).astype(np.int64)
    except (OSError, ValueError) as e:
        raise DynaSegDecodeError(path, str(e))


def _read_bsd_variants(path: str) -> List[LabelMap]:
    try:
        gt = scipy.io.loadmat(path)["groundTruth"]
        segmentations = [gt[0, i]["Segmentation"][0, 0] for i in range(gt.shape[1])]
    except (OSError, ValueError, KeyError, IndexError) as e:
        raise DynaSegDecodeError(path, str(e))
    return [LabelMap(labels=_dense(np.asarray(s).astype(np.int64), None)) for s in segmentations]


def _resize_center(image: ImageTensor, labels: List[np.ndarray], size: int) -> Tuple[ImageTensor, List[np.ndarray]]:
    """Escala el lado menor a `size` y recorta el centro a size×size"""
    h, w = image.height, image.width
    scale = size / min(h, w)
    new_h, new_w = max(size, round(h * scale)), max(size, round(w * scale))
    top, left = (new_h - size) // 2, (new_w - size) // 2
    box = (left, top, left + size, top + size)

    rgb = Image.fromarray((image.pixels * 255.0 + 0.5).astype(np.uint8))
    rgb = rgb.resize((new_w, new_h), Image.BILINEAR).crop(box)
    resized = [
        np.asarray(Image.fromarray(lab.astype(np.int32)).resize((new_w, new_h), Image.NEAREST).crop(box)).astype(np.int64)
        for lab in labels
    ]
    pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    return ImageTensor(pixels=pixels, source_id=image.source_id), resized


def load_item(
    manifest: DatasetManifest, item_id: str, resize: Union[int, None] = None
) -> Tuple[ImageTensor, GroundTruth]:
    """Carga una imagen y su ground truth

    En COCO-Stuff las clases finas se fusionan a las 27 gruesas; en BSD500 y VOC cada
    segmento se renumera a ids densos por imagen. `resize` (solo usado en modo dataset)
    escala el lado menor y recorta el centro.

    Errores:
        `dynaseg.exceptions.DynaSegInvalidSpecError`: El id no está en el manifiesto.
        `dynaseg.exceptions.DynaSegDecodeError`: No se pudo leer algún archivo (incluye la ruta).
    """
    if item_id not in manifest.item_ids:
        raise DynaSegInvalidSpecError("id", f"'{item_id}' no pertenece al manifiesto {manifest.name.value}/{manifest.split}")

    root, split = manifest.root, manifest.split
    if manifest.name == DatasetName.BSD500:
        images, gts = _bsd_dirs(root, split)
        image = read_image(os.path.join(images, f"{item_id}.jpg"), item_id)
        raw = [v.labels for v in _read_bsd_variants(os.path.join(gts, f"{item_id}.mat"))]
    elif manifest.name == DatasetName.VOC2012:
        base = _voc_base(root)
        image = read_image(os.path.join(base, "JPEGImages", f"{item_id}.jpg"), item_id)
        raw = [_dense(_read_png_labels(os.path.join(base, "SegmentationClass", f"{item_id}.png")), manifest.ignore_label)]
    else:
        images, annotations = _coco_dirs(root, split)
        image = read_image(os.path.join(images, f"{item_id}.jpg"), item_id)
        path = os.path.join(annotations, f"{item_id}.png")
        raw = [_merge_coco(_read_png_labels(path), manifest, path)]

    if resize is not None:
        image, raw = _resize_center(image, raw, resize)
    for labels in raw:
        if labels.shape != (image.height, image.width):
            raise DynaSegDecodeError(item_id, f"el ground truth {labels.shape} no coincide con la imagen")

    return image, GroundTruth(
        variants=[LabelMap(labels=labels) for labels in raw],
        ignore_label=manifest.ignore_label,
    )


def _merge_coco(fine: np.ndarray, manifest: DatasetManifest, path: str) -> np.ndarray:
    lookup = np.full(VOID_LABEL + 1, -1, dtype=np.int64)
    for fine_id, coarse_id in manifest.fine_to_coarse.items():
        lookup[fine_id] = coarse_id
    lookup[VOID_LABEL] = VOID_LABEL

    if fine.size and (fine.min() < 0 or fine.max() > VOID_LABEL):
        raise DynaSegDecodeError(path, "ids finos fuera de rango")
    coarse = lookup[fine]
    if np.any(coarse < 0):
        unknown = sorted(set(fine[coarse < 0].tolist()))
        raise DynaSegDecodeError(path, f"ids finos sin clase gruesa: {unknown}")
    return coarse


def synthetic_corpus(spec: SyntheticSpec) -> List[Tuple[ImageTensor, GroundTruth]]:
    """Imágenes de franjas verticales de color constante con ground truth exacto

    La imagen i tiene `block_counts[i % len(block_counts)]` franjas. Se suma ruido
    gaussiano de desviación `noise` y se recorta a [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for i in range(spec.num_images):
        blocks = spec.block_counts[i % len(spec.block_counts)]
        if blocks > len(SYNTHETIC_COLORS) or blocks > spec.size:
            raise DynaSegInvalidSpecError("block_counts", f"no se pueden generar {blocks} franjas")

        colors = np.asarray(SYNTHETIC_COLORS, dtype=np.float32)[rng.permutation(len(SYNTHETIC_COLORS))[:blocks]]
        labels = np.zeros((spec.size, spec.size), dtype=np.int64)
        for label, columns in enumerate(np.array_split(np.arange(spec.size), blocks)):
            labels[:, columns] = label

        pixels = colors[labels]
        if spec.noise > 0:
            pixels = pixels + rng.normal(0.0, spec.noise, size=pixels.shape).astype(np.float32)
        pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

        corpus.append(
            (
                ImageTensor(pixels=pixels, source_id=f"synthetic_{i:04d}"),
                GroundTruth(variants=[LabelMap(labels=labels, num_classes=blocks)]),
            )
        )
    return corpus
