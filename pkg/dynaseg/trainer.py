import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from typing import IO, List, Sequence, Tuple, Union

import torch

from dynaseg.backbones import SegmentationModel, build_model, forward
from dynaseg.core import ImageTensor, LabelMap, ResponseMap, argmax_labels, normalize_response, seed_all
from dynaseg.exceptions import (
    DynaSegEmptyBatchError,
    DynaSegException,
    DynaSegNonFiniteLossError,
    DynaSegSingleClusterError,
)
from dynaseg.losses import combined_loss, is_finite
from dynaseg.schemas.config import OptimizerSpec, RunConfig, TrainMode
from dynaseg.schemas.results import (
    BatchOutcome,
    GateDecision,
    IterationRecord,
    SegmentationFailure,
    SegmentationResult,
    SilhouetteResult,
    StopReason,
    TrainState,
)
from dynaseg.silhouette import select_opt_nC, should_stop

logger = logging.getLogger(__name__)


def build_optimizer(model: SegmentationModel, spec: OptimizerSpec) -> torch.optim.SGD:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay)


def _predict(model: SegmentationModel, image: ImageTensor) -> Tuple[ResponseMap, LabelMap]:
    resp = normalize_response(forward(model, image))
    return resp, argmax_labels(resp)


def _gate_threshold(
    config: RunConfig, image: ImageTensor, resp: ResponseMap, q_prime: int
) -> Tuple[int, Union[SilhouetteResult, None]]:
    if not config.silhouette.enabled:
        return config.silhouette.threshold, None

    sil = config.silhouette
    try:
        result = select_opt_nC(
            image,
            resp,
            sil.candidate_ks(),
            sil.sample_size,
            seed=config.seed,
            n_init=sil.n_init,
            metric=sil.metric,
            feature_source=sil.feature_source,
            homogeneous_fraction=sil.homogeneous_fraction,
        )
    except DynaSegSingleClusterError:
        logger.warning(
            "[%s] ningún candidato produjo una partición válida, se usa el umbral fijo %d",
            image.source_id, sil.threshold,
        )
        return sil.threshold, None
    # El umbral nunca exige más clusters de los que produjo la primera iteración
    return min(result.opt_nC, q_prime), result


def first_iteration_gate(image: ImageTensor, config: RunConfig) -> Tuple[int, int, Union[SilhouetteResult, None]]:
    """Calcula el umbral de q' de la primera iteración sin entrenar

    Construye la misma red inicial que `segment_image` (misma semilla), por lo que el
    umbral coincide con el que usaría una corrida completa.

    Retorna:
        Tupla (q' de la primera iteración, umbral, `SilhouetteResult` o `None`)
    """
    seed_all(config.seed)
    model = build_model(config)
    model.train()
    with torch.no_grad():
        resp, labels = _predict(model, image)
    threshold, silhouette = _gate_threshold(config, image, resp, labels.unique_count)
    return labels.unique_count, threshold, silhouette


def _step(
    model: SegmentationModel,
    optimizer: torch.optim.Optimizer,
    resp: ResponseMap,
    labels: LabelMap,
    config: RunConfig,
    state: TrainState,
) -> IterationRecord:
    q_prime = labels.unique_count
    breakdown = combined_loss(resp, labels, config.schedule, q_prime, config.loss.reduction)
    if not is_finite(breakdown):
        raise DynaSegNonFiniteLossError(state.iter, state.model_copy(deep=True))

    optimizer.zero_grad()
    breakdown.objective.backward()
    optimizer.step()

    return IterationRecord(
        iter=state.iter,
        mu=breakdown.mu,
        loss_sim=breakdown.sim,
        loss_con=breakdown.con,
        loss_total=breakdown.total,
        q_prime=q_prime,
    )


def segment_image(image: ImageTensor, config: RunConfig) -> SegmentationResult:
    """Optimiza una red nueva sobre una imagen y retorna su segmentación

    Cada iteración: forward → normalización → argmax → q' → μ → pérdida → backward → SGD.
    En la primera iteración se calcula el umbral de q' (silhouette o fijo). El ciclo se
    detiene cuando q' ≤ umbral o tras T actualizaciones. Si q' cae por debajo de opt_nC
    en un solo paso, la segmentación final es la última que aún tenía q' ≥ opt_nC.
    Con `train.num_threads` definido, los hilos de torch se restauran al terminar.

    Parámetros:
        image: Imagen a segmentar.
        config: Configuración de la corrida.

    Retorna:
        Objeto `SegmentationResult`

    Errores:
        `dynaseg.exceptions.DynaSegNonFiniteLossError`: La pérdida dejó de ser finita (incluye el estado).
        `dynaseg.exceptions.DynaSegException`: Errores al construir el backbone o al propagar la imagen.
    """
    previous_threads = torch.get_num_threads()
    if config.train.num_threads is not None:
        torch.set_num_threads(config.train.num_threads)
    try:
        return _segment_image(image, config)
    finally:
        torch.set_num_threads(previous_threads)


def _segment_image(image: ImageTensor, config: RunConfig) -> SegmentationResult:
    start = time.perf_counter()
    seed_all(config.seed)

    model = build_model(config)
    model.train()
    optimizer = build_optimizer(model, config.optimizer)
    state = TrainState()
    threshold = config.silhouette.threshold
    silhouette: Union[SilhouetteResult, None] = None
    previous: Union[LabelMap, None] = None

    with ExitStack() as stack:
        log: Union[IO[str], None] = None
        if config.train.log_path:
            log = stack.enter_context(open(config.train.log_path, "w", encoding="utf-8"))

        while True:
            resp, labels = _predict(model, image)
            q_prime = labels.unique_count
            if state.iter == 0 and previous is None:
                threshold, silhouette = _gate_threshold(config, image, resp, q_prime)

            decision = should_stop(q_prime, threshold, state.iter, config.train.max_iters)
            if decision == GateDecision.STOP_THRESHOLD:
                state.stopped_by = StopReason.THRESHOLD
                if q_prime < threshold and previous is not None:
                    labels = previous
                break
            if decision == GateDecision.STOP_MAX_ITERS:
                state.stopped_by = StopReason.MAX_ITERS
                break

            entry = _step(model, optimizer, resp, labels, config, state)
            state.record(entry)
            previous = labels
            logger.debug(
                "[%s] iter %d: q'=%d mu=%.4f loss=%.5f",
                image.source_id, entry.iter, entry.q_prime, entry.mu, entry.loss_total,
            )
            if log is not None:
                log.write(entry.model_dump_json() + "\n")

    wall_time = time.perf_counter() - start
    logger.info(
        "[%s] detenido por %s tras %d iteraciones, q'=%d (umbral %d)",
        image.source_id, state.stopped_by.value, state.iter, labels.unique_count, threshold,
    )
    return SegmentationResult(
        source_id=image.source_id,
        final_labels=labels,
        state=state,
        silhouette=silhouette,
        threshold=threshold,
        wall_time=wall_time,
    )


def _segment_isolated(index: int, image: ImageTensor, config: RunConfig):
    try:
        return index, segment_image(image, config), None
    except DynaSegException as e:
        return index, None, SegmentationFailure(
            index=index, source_id=image.source_id, error=type(e).__name__, message=str(e)
        )


def segment_batch(
    images: Sequence[ImageTensor], config: RunConfig, parallelism: int = 1
) -> BatchOutcome:
    """Segmenta cada imagen con su propia red y optimizador

    Las fallas por imagen se registran sin detener el lote. Con `parallelism` > 1 cada
    imagen corre en un proceso separado; todos usan la misma cantidad de hilos de torch
    para que los resultados no dependan del paralelismo.

    Errores:
        `dynaseg.exceptions.DynaSegEmptyBatchError`: La lista de imágenes está vacía.
    """
    if len(images) == 0:
        raise DynaSegEmptyBatchError()

    if config.train.mode == TrainMode.DATASET:
        return segment_dataset(images, config)

    num_threads = config.train.num_threads or torch.get_num_threads()
    config = config.model_copy(update={"train": config.train.model_copy(update={"num_threads": num_threads})})
    if parallelism > 1:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=parallelism, mp_context=context) as executor:
            futures = [
                executor.submit(_segment_isolated, i, image, config)
                for i, image in enumerate(images)
            ]
            outputs = [f.result() for f in futures]
    else:
        outputs = [_segment_isolated(i, image, config) for i, image in enumerate(images)]

    outcome = BatchOutcome()
    for index, result, failure in sorted(outputs, key=lambda o: o[0]):
        if failure is not None:
            logger.warning("Falló la imagen %s: %s", failure.source_id, failure.message)
            outcome.failures.append(failure)
        else:
            outcome.results.append(result)
    return outcome


def segment_dataset(images: Sequence[ImageTensor], config: RunConfig) -> BatchOutcome:
    """Entrena un único modelo sobre todas las imágenes (modo `dataset`)

    Recorre las imágenes en orden durante T pasadas, con una actualización SGD por imagen
    y μ calculado con el q' de esa imagen. No aplica el umbral de q'. Luego predice cada
    imagen por argmax con el modelo entrenado.
    """
    if len(images) == 0:
        raise DynaSegEmptyBatchError()

    start = time.perf_counter()
    seed_all(config.seed)
    model = build_model(config)
    model.train()
    optimizer = build_optimizer(model, config.optimizer)
    state = TrainState()
    outcome = BatchOutcome()
    failed: List[int] = []

    for _ in range(config.train.max_iters):
        for index, image in enumerate(images):
            if index in failed:
                continue
            try:
                resp, labels = _predict(model, image)
                state.record(_step(model, optimizer, resp, labels, config, state))
            except DynaSegNonFiniteLossError:
                raise
            except DynaSegException as e:
                failed.append(index)
                outcome.failures.append(
                    SegmentationFailure(
                        index=index, source_id=image.source_id, error=type(e).__name__, message=str(e)
                    )
                )
    state.stopped_by = StopReason.MAX_ITERS

    wall_time = time.perf_counter() - start
    with torch.no_grad():
        for index, image in enumerate(images):
            if index in failed:
                continue
            _, labels = _predict(model, image)
            outcome.results.append(
                SegmentationResult(
                    source_id=image.source_id,
                    final_labels=labels,
                    state=state,
                    threshold=config.silhouette.threshold,
                    wall_time=wall_time,
                )
            )
    return outcome


def write_training_log(state: TrainState, path: str) -> None:
    """Escribe el historial de iteraciones como JSON-lines (un registro por iteración)"""
    with open(path, "w", encoding="utf-8") as f:
        for entry in state.history:
            f.write(entry.model_dump_json() + "\n")
