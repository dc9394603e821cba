import math
from typing import Union

import torch
import torch.nn.functional as F

from dynaseg.core import LabelMap, ResponseMap
from dynaseg.exceptions import (
    DynaSegInvalidQPrimeError,
    DynaSegShapeMismatchError,
    DynaSegTooSmallError,
)
from dynaseg.schemas.config import LossReduction, MuSchedule, ScheduleKind
from dynaseg.schemas.results import LossBreakdown


def _reduction(reduction: Union[LossReduction, str]) -> LossReduction:
    return LossReduction(reduction)


def feature_similarity_loss(
    resp: ResponseMap,
    labels: LabelMap,
    reduction: Union[LossReduction, str] = LossReduction.MEAN,
) -> torch.Tensor:
    """Entropía cruzada softmax entre la respuesta normalizada y las etiquetas argmax

    Las etiquetas se tratan como constantes: no fluye gradiente por su construcción.

    Parámetros:
        resp: Respuesta normalizada (H, W, q).
        labels: Etiquetas (H, W), normalmente `argmax_labels(resp)`.
        reduction: `mean` promedia sobre los N píxeles, `sum` suma.

    Retorna:
        Tensor escalar no negativo

    Errores:
        `dynaseg.exceptions.DynaSegShapeMismatchError`: La respuesta y las etiquetas difieren en H×W.
    """
    if tuple(labels.shape) != (resp.height, resp.width):
        raise DynaSegShapeMismatchError((resp.height, resp.width), tuple(labels.shape))

    logits = resp.values.reshape(-1, resp.q)
    target = torch.from_numpy(labels.labels.reshape(-1)).to(logits.device)
    return F.cross_entropy(logits, target, reduction=_reduction(reduction).value)


def spatial_continuity_loss(
    resp: ResponseMap,
    reduction: Union[LossReduction, str] = LossReduction.MEAN,
) -> torch.Tensor:
    """Norma L1 de las diferencias horizontales y verticales entre vecinos

    Con `mean` la suma se divide por la cantidad de términos q·(H·(W−1) + (H−1)·W).

    Errores:
        `dynaseg.exceptions.DynaSegTooSmallError`: H < 2 o W < 2.
    """
    if resp.height < 2 or resp.width < 2:
        raise DynaSegTooSmallError(resp.height, resp.width)

    values = resp.values
    horizontal = torch.abs(values[:, 1:, :] - values[:, :-1, :]).sum()
    vertical = torch.abs(values[1:, :, :] - values[:-1, :, :]).sum()
    total = horizontal + vertical
    if _reduction(reduction) == LossReduction.SUM:
        return total

    h, w, q = resp.height, resp.width, resp.q
    return total / (q * (h * (w - 1) + (h - 1) * w))


def compute_mu(schedule: MuSchedule, q_prime: int) -> float:
    """Peso de balance μ

    FSF: μ = q'/α, SCF: μ = α/q', FIXED: μ constante.

    Errores:
        `dynaseg.exceptions.DynaSegInvalidQPrimeError`: q' < 1.
    """
    if q_prime < 1:
        raise DynaSegInvalidQPrimeError(q_prime)

    if schedule.kind == ScheduleKind.FSF:
        return q_prime / schedule.alpha
    if schedule.kind == ScheduleKind.SCF:
        return schedule.alpha / q_prime
    return float(schedule.mu)


def combined_loss(
    resp: ResponseMap,
    labels: LabelMap,
    schedule: MuSchedule,
    q_prime: int,
    reduction: Union[LossReduction, str] = LossReduction.MEAN,
) -> LossBreakdown:
    """L = L_sim + μ·L_con con μ = compute_mu(schedule, q')

    Retorna:
        Objeto `LossBreakdown`, el tensor con gradiente queda en `objective`
    """
    mu = compute_mu(schedule, q_prime)
    sim = feature_similarity_loss(resp, labels, reduction)
    con = spatial_continuity_loss(resp, reduction)
    sim_value = float(sim.detach())
    con_value = float(con.detach())
    return LossBreakdown(
        sim=sim_value,
        con=con_value,
        mu=mu,
        total=sim_value + mu * con_value,
        objective=sim + mu * con,
    )


def is_finite(breakdown: LossBreakdown) -> bool:
    return all(math.isfinite(v) for v in (breakdown.sim, breakdown.con, breakdown.total))
