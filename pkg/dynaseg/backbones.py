import logging
import os
from typing import List, Union

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet18

from dynaseg.core import FeatureMap, ImageTensor, ResponseMap
from dynaseg.exceptions import (
    DynaSegInvalidSpecError,
    DynaSegShapeMismatchError,
    DynaSegWeightsUnavailableError,
)
from dynaseg.schemas.config import (
    BackboneKind,
    CnnBackboneSpec,
    ResNetFpnSpec,
    RunConfig,
    UpsampleMode,
)

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RESNET_STAGE_CHANNELS = (64, 128, 256, 512)


def _init_conv(conv: nn.Conv2d) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def _init_bn(bn: nn.BatchNorm2d) -> None:
    nn.init.ones_(bn.weight)
    nn.init.zeros_(bn.bias)


class CnnBackbone(nn.Module):
    """M componentes conv → ReLU → batch-norm con stride 1 y padding 'same' replicando el borde"""

    def __init__(self, spec: CnnBackboneSpec):
        super().__init__()
        kernel_sizes = spec.resolved_kernel_sizes()
        layers: List[nn.Module] = []
        in_channels = spec.in_channels
        for k in kernel_sizes:
            conv = nn.Conv2d(
                in_channels, spec.channels, kernel_size=k, stride=1, padding=k // 2, padding_mode="replicate"
            )
            bn = nn.BatchNorm2d(spec.channels)
            _init_conv(conv)
            _init_bn(bn)
            layers.append(nn.Sequential(conv, nn.ReLU(inplace=True), bn))
            in_channels = spec.channels
        self.components = nn.ModuleList(layers)
        self.in_channels = spec.in_channels
        self.out_channels = spec.channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for component in self.components:
            x = component(x)
        return x


class ResNetFpnBackbone(nn.Module):
    """ResNet-18 sin GAP ni FC, con decoder FPN

    Proyecciones laterales 1x1 de las cuatro etapas a `pyramid_channels`, camino top-down
    con upsampling ×2 y suma, convolución 3x3 de suavizado y upsampling a la resolución
    de entrada. Las batch-norm del tronco usan siempre sus estadísticas acumuladas, ya
    que con una sola imagen la etapa final puede quedar en 1x1.
    """

    def __init__(self, spec: ResNetFpnSpec):
        super().__init__()
        trunk = resnet18(weights=None)
        if spec.weights_path is not None and os.path.isfile(spec.weights_path):
            _load_trunk_weights(trunk, spec.weights_path)
        elif spec.allow_random_init:
            logger.warning(
                "Pesos pre-entrenados no encontrados (%s), se usa inicialización aleatoria",
                spec.weights_path,
            )
        else:
            raise DynaSegWeightsUnavailableError(
                spec.weights_path,
                "el archivo no existe y no se permitió inicialización aleatoria (allow_random_init)",
            )

        self.stem = nn.Sequential(trunk.conv1, trunk.bn1, trunk.relu, trunk.maxpool)
        self.stages = nn.ModuleList([trunk.layer1, trunk.layer2, trunk.layer3, trunk.layer4])
        self.laterals = nn.ModuleList(
            [nn.Conv2d(c, spec.pyramid_channels, kernel_size=1) for c in RESNET_STAGE_CHANNELS]
        )
        self.smooth = nn.Conv2d(spec.pyramid_channels, spec.pyramid_channels, kernel_size=3, padding=1)
        for conv in [*self.laterals, self.smooth]:
            _init_conv(conv)

        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.upsample = spec.upsample
        self.in_channels = 3
        self.out_channels = spec.pyramid_channels

        if spec.freeze_trunk:
            for param in [*self.stem.parameters(), *self.stages.parameters()]:
                param.requires_grad_(False)
        self.train()

    def train(self, mode: bool = True) -> "ResNetFpnBackbone":
        super().train(mode)
        for module in [*self.stem.modules(), *self.stages.modules()]:
            if isinstance(module, nn.BatchNorm2d):
                module.eval()
        return self

    def _resize(self, x: torch.Tensor, size) -> torch.Tensor:
        if self.upsample == UpsampleMode.BILINEAR:
            return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return F.interpolate(x, size=size, mode="nearest")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        x = (x - self.pixel_mean) / self.pixel_std
        x = self.stem(x)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)

        top = self.laterals[-1](features[-1])
        laterals = list(self.laterals)
        for lateral, feature in zip(laterals[-2::-1], features[-2::-1]):
            lat = lateral(feature)
            top = lat + self._resize(top, lat.shape[-2:])

        return self._resize(self.smooth(top), size)


def _load_trunk_weights(trunk: nn.Module, path: str) -> None:
    try:
        state = torch.load(path, map_location="cpu")
    except Exception as e:
        raise DynaSegWeightsUnavailableError(path, str(e))

    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    missing, unexpected = trunk.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("fc.")]
    if missing:
        raise DynaSegWeightsUnavailableError(path, f"faltan parámetros del tronco: {missing[:5]}")
    if unexpected:
        logger.warning("Parámetros ignorados al cargar %s: %s", path, unexpected[:5])
    logger.info("Pesos pre-entrenados cargados desde %s", path)


class ClassifierHead(nn.Module):
    """Clasificador lineal por píxel r = W_c·x (convolución 1x1) seguido de batch-norm opcional"""

    def __init__(self, p: int, q: int, *, bias: bool = True, batch_norm: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(p, q, kernel_size=1, bias=bias)
        self.norm = nn.BatchNorm2d(q) if batch_norm else None
        _init_conv(self.conv)
        if self.norm is not None:
            _init_bn(self.norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return x


class SegmentationModel(nn.Module):
    def __init__(self, backbone: nn.Module, head: ClassifierHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    @property
    def in_channels(self) -> int:
        return int(self.backbone.in_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def _validate_cnn_spec(spec: CnnBackboneSpec) -> List[int]:
    if spec.num_components < 1:
        raise DynaSegInvalidSpecError("num_components", "debe ser al menos 1")
    if spec.channels < 1:
        raise DynaSegInvalidSpecError("channels", "debe ser al menos 1")
    kernel_sizes = spec.resolved_kernel_sizes()
    if len(kernel_sizes) != spec.num_components:
        raise DynaSegInvalidSpecError(
            "kernel_sizes", f"se esperaban {spec.num_components} tamaños, se obtuvieron {len(kernel_sizes)}"
        )
    if any(k < 1 or k % 2 == 0 for k in kernel_sizes):
        raise DynaSegInvalidSpecError("kernel_sizes", "los kernels deben ser impares y positivos")
    return kernel_sizes


def cnn_parameter_count(spec: CnnBackboneSpec, q: int, *, head_bias: bool = True, head_batch_norm: bool = True) -> int:
    """Cantidad de parámetros entrenables, en forma cerrada, de la CNN más su cabeza

    Cada componente aporta c_in·p·k² pesos, p sesgos y 2p parámetros de batch-norm.
    La cabeza aporta p·q pesos, q sesgos y 2q de batch-norm.
    """
    total = 0
    in_channels = spec.in_channels
    for k in _validate_cnn_spec(spec):
        total += in_channels * spec.channels * k * k + spec.channels + 2 * spec.channels
        in_channels = spec.channels
    total += spec.channels * q + (q if head_bias else 0) + (2 * q if head_batch_norm else 0)
    return total


def build_cnn_backbone(
    spec: CnnBackboneSpec,
    q: int = 100,
    seed: Union[int, None] = None,
    *,
    head_batch_norm: bool = True,
) -> SegmentationModel:
    """Construye la CNN de M componentes con su cabeza de clasificación

    Parámetros:
        spec: Especificación de la CNN.
        q: Dimensión del espacio de clusters.
        seed: Semilla opcional para la inicialización de pesos.
        head_batch_norm: Si la cabeza termina en batch-norm.

    Retorna:
        Modelo que transforma (1, 3, H, W) en (1, q, H, W)

    Errores:
        `dynaseg.exceptions.DynaSegInvalidSpecError`: M < 1, p < 1 o kernels inválidos.
    """
    _validate_cnn_spec(spec)
    if q < 1:
        raise DynaSegInvalidSpecError("q", "debe ser al menos 1")
    if seed is not None:
        torch.manual_seed(seed)
    model = SegmentationModel(
        CnnBackbone(spec), ClassifierHead(spec.channels, q, batch_norm=head_batch_norm)
    )
    logger.debug("CNN construida con %d parámetros", count_parameters(model))
    return model


def build_resnet_fpn_backbone(
    spec: ResNetFpnSpec, seed: Union[int, None] = None, *, head_batch_norm: bool = True
) -> SegmentationModel:
    """Construye ResNet-18 + FPN con su cabeza de clasificación

    Errores:
        `dynaseg.exceptions.DynaSegWeightsUnavailableError`: No se pudieron cargar los pesos y no se permitió inicialización aleatoria.
    """
    if spec.depth != 18:
        raise DynaSegInvalidSpecError("depth", "solo se soporta ResNet-18")
    if spec.pyramid_channels < 1 or spec.out_channels < 1:
        raise DynaSegInvalidSpecError("pyramid_channels", "los anchos deben ser positivos")
    if seed is not None:
        torch.manual_seed(seed)
    backbone = ResNetFpnBackbone(spec)
    model = SegmentationModel(
        backbone,
        ClassifierHead(spec.pyramid_channels, spec.out_channels, batch_norm=head_batch_norm),
    )
    logger.debug("ResNet-FPN construida con %d parámetros", count_parameters(model))
    return model


def build_model(config: RunConfig) -> SegmentationModel:
    backbone = config.backbone
    if backbone.kind == BackboneKind.RESNET_FPN:
        return build_resnet_fpn_backbone(
            backbone.resnet_spec(), head_batch_norm=backbone.head_batch_norm
        )
    return build_cnn_backbone(backbone.cnn_spec(), backbone.q, head_batch_norm=backbone.head_batch_norm)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _as_batch(model: SegmentationModel, image: ImageTensor) -> torch.Tensor:
    if image.channels != model.in_channels:
        raise DynaSegShapeMismatchError(
            (image.height, image.width, model.in_channels), tuple(image.pixels.shape)
        )
    device = next(model.parameters()).device
    return torch.from_numpy(image.pixels).permute(2, 0, 1).unsqueeze(0).to(device)


def extract_features(model: SegmentationModel, image: ImageTensor) -> FeatureMap:
    """Mapa de características p-dimensional (H, W, p) antes de la cabeza"""
    x = model.backbone(_as_batch(model, image))
    return FeatureMap(values=x[0].permute(1, 2, 0))


def forward(model: SegmentationModel, image: ImageTensor) -> ResponseMap:
    """Propaga la imagen y retorna la respuesta sin normalizar (H, W, q)

    Errores:
        `dynaseg.exceptions.DynaSegShapeMismatchError`: La imagen no tiene los canales que espera el modelo.
    """
    x = model(_as_batch(model, image))
    return ResponseMap(values=x[0].permute(1, 2, 0), normalized=False)
