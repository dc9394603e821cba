import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence, Union

import numpy as np
from sklearn import metrics
from sklearn.cluster import KMeans

from dynaseg.core import ImageTensor, ResponseMap
from dynaseg.exceptions import DynaSegInvalidSpecError, DynaSegSingleClusterError
from dynaseg.schemas.config import DEFAULT_HOMOGENEOUS_FRACTION, FeatureSource
from dynaseg.schemas.results import GateDecision, SilhouetteResult

logger = logging.getLogger(__name__)

# Variación bajo la cual un píxel se considera interior a una región
HOMOGENEITY_TOLERANCE = 1e-4
# Diferencia de silhouette bajo la cual dos candidatos empatan
SCORE_TIE_TOLERANCE = 1e-3


def silhouette_score(points, assignment, metric: str = "euclidean") -> float:
    """Silhouette promedio s(i) = (b − a) / max(a, b)

    Los clusters de un único punto aportan s(i) = 0.

    Parámetros:
        points: Arreglo (n, d) o lista de vectores.
        assignment: Etiqueta de cluster de cada punto.
        metric: Métrica de distancia (ver `sklearn.metrics.pairwise_distances`).

    Errores:
        `dynaseg.exceptions.DynaSegSingleClusterError`: Hay menos de 2 etiquetas distintas.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(assignment)
    n_labels = int(np.unique(labels).size)
    if n_labels < 2:
        raise DynaSegSingleClusterError(n_labels)

    # Todos los clusters son de un punto
    if n_labels >= len(labels):
        return 0.0
    return float(metrics.silhouette_score(x, labels, metric=metric))


def local_variation(features: np.ndarray) -> np.ndarray:
    """Distancia euclidiana máxima de cada píxel a sus 4 vecinos

    Parámetros:
        features: Arreglo (H, W, d).

    Retorna:
        Arreglo (H, W)
    """
    x = np.asarray(features, dtype=np.float64)
    horizontal = np.linalg.norm(x[:, 1:] - x[:, :-1], axis=-1)
    vertical = np.linalg.norm(x[1:] - x[:-1], axis=-1)

    out = np.zeros(x.shape[:2])
    out[:, 1:] = np.maximum(out[:, 1:], horizontal)
    out[:, :-1] = np.maximum(out[:, :-1], horizontal)
    out[1:] = np.maximum(out[1:], vertical)
    out[:-1] = np.maximum(out[:-1], vertical)
    return out


def homogeneous_mask(features: np.ndarray, fraction: float) -> np.ndarray:
    """Píxeles cuya variación local no supera el cuantil `fraction`

    Los píxeles de variación nula (hasta `HOMOGENEITY_TOLERANCE`) siempre se conservan.
    Con `fraction` = 1 se conservan todos.
    """
    variation = local_variation(features)
    if fraction >= 1:
        return np.ones(variation.shape, dtype=bool)
    limit = max(float(np.quantile(variation, fraction)), HOMOGENEITY_TOLERANCE)
    return variation <= limit


def _sample_points(
    image: ImageTensor,
    first_resp: ResponseMap,
    sample_size: int,
    seed: int,
    feature_source: FeatureSource,
    homogeneous_fraction: float = 1.0,
) -> np.ndarray:
    if feature_source == FeatureSource.COLOR:
        grid = image.pixels.astype(np.float64)
    else:
        grid = first_resp.values.detach().cpu().numpy().astype(np.float64)

    # Los píxeles de borde entre regiones mezclan vecindarios y no forman clusters propios
    mask = homogeneous_mask(grid, homogeneous_fraction)
    features = grid[mask]

    n = features.shape[0]
    if sample_size >= n:
        return features
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=sample_size, replace=False))
    return features[idx]


def _score_candidate(points: np.ndarray, k: int, n_init: int, seed: int, metric: str) -> float:
    if k >= len(points):
        return -math.inf

    assignment = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit_predict(points)
    # k-means no logró k grupos distintos: el candidato no representa k clusters
    if np.unique(assignment).size != k:
        return -math.inf
    try:
        return silhouette_score(points, assignment, metric=metric)
    except DynaSegSingleClusterError:
        return -math.inf


def select_opt_nC(
    image: ImageTensor,
    first_resp: ResponseMap,
    candidate_ks: Sequence[int],
    sample_size: int,
    *,
    seed: int = 0,
    n_init: int = 10,
    metric: str = "euclidean",
    feature_source: Union[FeatureSource, str] = FeatureSource.RESPONSE,
    homogeneous_fraction: float = DEFAULT_HOMOGENEOUS_FRACTION,
    jobs: int = 1,
) -> SilhouetteResult:
    """Selecciona el número de clusters con mejor silhouette sobre la primera iteración

    Descarta los píxeles de borde entre regiones (se conservan los de menor variación local,
    ver `homogeneous_mask`), muestrea hasta `sample_size` de los restantes (uniforme, con
    semilla), agrupa sus vectores con k-means (k-means++, `n_init` reinicios) para cada k
    candidato y se queda con el k de mayor silhouette. Los candidatos que no producen k
    grupos quedan con score -inf y no participan del argmax. Los scores a menos de
    `SCORE_TIE_TOLERANCE` del mejor empatan y favorecen el k menor.

    Parámetros:
        image: Imagen original (se usa si `feature_source` es `color`).
        first_resp: Respuesta normalizada de la primera iteración.
        candidate_ks: Candidatos, todos ≥ 2.
        sample_size: Cantidad máxima de píxeles muestreados.
        homogeneous_fraction: Fracción de píxeles más homogéneos entre los que se muestrea.

    Retorna:
        Objeto `SilhouetteResult`

    Errores:
        `dynaseg.exceptions.DynaSegInvalidSpecError`: Candidatos vacíos o menores a 2.
        `dynaseg.exceptions.DynaSegSingleClusterError`: Ningún candidato produjo una partición válida.
    """
    ks = sorted(set(int(k) for k in candidate_ks))
    if not ks or ks[0] < 2:
        raise DynaSegInvalidSpecError("candidate_ks", "se necesitan candidatos mayores o iguales a 2")
    if sample_size < 2:
        raise DynaSegInvalidSpecError("sample_size", "debe ser al menos 2")

    points = _sample_points(
        image, first_resp, sample_size, seed, FeatureSource(feature_source), homogeneous_fraction
    )

    def score(k: int) -> float:
        return _score_candidate(points, k, n_init, seed, metric)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            scores: List[float] = list(executor.map(score, ks))
    else:
        scores = [score(k) for k in ks]

    valid = [(s, k) for s, k in zip(scores, ks) if math.isfinite(s)]
    if not valid:
        raise DynaSegSingleClusterError(1)

    best_score = max(s for s, _ in valid)
    opt = min(k for s, k in valid if s >= best_score - SCORE_TIE_TOLERANCE)
    logger.debug("Silhouette para %s: opt_nC=%d (score %.4f)", image.source_id, opt, best_score)

    return SilhouetteResult(
        candidate_ks=[k for s, k in zip(scores, ks) if math.isfinite(s)],
        scores=[s for s in scores if math.isfinite(s)],
        opt_nC=opt,
    )


def should_stop(q_prime: int, opt_nC: int, iter: int, T: int) -> GateDecision:
    """Decide si el entrenamiento continúa

    El umbral (q' ≤ opt_nC) tiene precedencia sobre el límite de iteraciones (iter ≥ T).
    """
    if q_prime <= opt_nC:
        return GateDecision.STOP_THRESHOLD
    if iter >= T:
        return GateDecision.STOP_MAX_ITERS
    return GateDecision.CONTINUE
