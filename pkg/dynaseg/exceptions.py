from typing import Any, Tuple, Union


class DynaSegException(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class DynaSegConfigError(DynaSegException):
    def __init__(self, message: str):
        super().__init__(message)


class DynaSegInvalidSpecError(DynaSegConfigError):
    def __init__(self, field: str, message: str):
        super().__init__(f"Especificación inválida en '{field}': {message}")
        self.field = field


class DynaSegShapeMismatchError(DynaSegException):
    def __init__(self, expected: Tuple[Any, ...], actual: Tuple[Any, ...]):
        super().__init__(f"Dimensiones incompatibles: se esperaba {expected}, se obtuvo {actual}")
        self.expected = expected
        self.actual = actual


class DynaSegTooSmallError(DynaSegException):
    def __init__(self, height: int, width: int):
        super().__init__(
            f"El mapa de {height}x{width} es demasiado pequeño, se necesita al menos 2x2"
        )
        self.height = height
        self.width = width


class DynaSegWeightsUnavailableError(DynaSegException):
    def __init__(self, path: Union[str, None], message: str):
        super().__init__(f"Pesos pre-entrenados no disponibles ({path}): {message}")
        self.path = path


class DynaSegInvalidQPrimeError(DynaSegException):
    def __init__(self, q_prime: int):
        super().__init__(f"q' debe ser mayor o igual a 1, se obtuvo {q_prime}")
        self.q_prime = q_prime


class DynaSegSingleClusterError(DynaSegException):
    def __init__(self, n_labels: int):
        super().__init__(
            f"El silhouette score requiere al menos 2 clusters, se obtuvieron {n_labels}"
        )
        self.n_labels = n_labels


class DynaSegNonFiniteLossError(DynaSegException):
    def __init__(self, iteration: int, state: Any):
        super().__init__(f"Pérdida no finita en la iteración {iteration}")
        self.iteration = iteration
        self.state = state


class DynaSegEmptyBatchError(DynaSegException):
    def __init__(self):
        super().__init__("El lote de imágenes está vacío")


class DynaSegEmptyEvalError(DynaSegException):
    def __init__(self):
        super().__init__("No hay píxeles para evaluar")


class DynaSegNoGroundTruthError(DynaSegException):
    def __init__(self, source_id: str):
        super().__init__(f"La imagen '{source_id}' no tiene ground truth")
        self.source_id = source_id


class DynaSegDatasetError(DynaSegException):
    def __init__(self, message: str):
        super().__init__(message)


class DynaSegMissingRootError(DynaSegDatasetError):
    def __init__(self, root: str):
        super().__init__(f"No existe la raíz del dataset: {root}")
        self.root = root


class DynaSegCorruptLayoutError(DynaSegDatasetError):
    def __init__(self, root: str, message: str):
        super().__init__(f"Estructura inválida en '{root}': {message}")
        self.root = root


class DynaSegDecodeError(DynaSegDatasetError):
    def __init__(self, path: str, message: str):
        super().__init__(f"No se pudo decodificar '{path}': {message}")
        self.path = path
