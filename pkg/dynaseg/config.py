import logging
import os
from typing import Any, Dict, Union

from pydantic import BaseModel

from dynaseg.exceptions import DynaSegConfigError
from dynaseg.overrides import ROOT_SECTION, ConfigOverrideFactory
from dynaseg.schemas.config import RunConfig

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_TXT = "effective_config.txt"
EFFECTIVE_CONFIG_JSON = "effective_config.json"
NONE_VALUES = ("", "none", "null")


def _section_models() -> Dict[str, Any]:
    sections = {}
    for name, field in RunConfig.model_fields.items():
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            sections[name] = annotation
    return sections


def parse_config_text(text: str, source: str = "<texto>") -> Dict[str, Any]:
    """Lee configuración plana `seccion.clave = valor` con comentarios `#`

    Las claves sin sección (p. ej. `seed = 3`) van al primer nivel. `none`/`null` o un
    valor vacío se interpretan como `None`.

    Retorna:
        Diccionario anidado listo para combinar con `RunConfig`

    Errores:
        `dynaseg.exceptions.DynaSegConfigError`: Línea mal formada, sección o clave desconocida.
    """
    sections = _section_models()
    nested: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DynaSegConfigError(f"{source}:{number}: se esperaba 'clave = valor'")

        key, value = (part.strip() for part in line.split("=", 1))
        parsed: Any = None if value.lower() in NONE_VALUES else value
        if "." in key:
            section, name = key.split(".", 1)
            if section == ROOT_SECTION:
                section = ""
        else:
            section, name = "", key

        if section == "":
            if name not in RunConfig.model_fields or name in sections:
                raise DynaSegConfigError(f"{source}:{number}: clave desconocida '{key}'")
            nested[name] = parsed
            continue
        if section not in sections:
            raise DynaSegConfigError(f"{source}:{number}: sección desconocida '{section}'")
        if name not in sections[section].model_fields:
            raise DynaSegConfigError(f"{source}:{number}: clave desconocida '{key}'")
        nested.setdefault(section, {})[name] = parsed
    return nested


def load_config_file(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DynaSegConfigError(f"No se pudo leer el archivo de configuración '{path}': {e}")
    return parse_config_text(text, source=str(path))


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(
    path: Union[str, os.PathLike, None] = None,
    overrides: Union[ConfigOverrideFactory, Dict[str, Any], None] = None,
) -> RunConfig:
    """Arma la configuración efectiva: flag de CLI > archivo > valor por defecto

    Errores:
        `dynaseg.exceptions.DynaSegConfigError`: Archivo ilegible o mal formado.
        `pydantic.ValidationError`: Algún valor no es válido.
    """
    data: Dict[str, Any] = load_config_file(path) if path is not None else {}
    if isinstance(overrides, ConfigOverrideFactory):
        try:
            overrides = overrides.as_nested()
        except DynaSegConfigError:
            overrides = {}
    if overrides:
        data = merge(data, overrides)
    return RunConfig.model_validate(data)


def to_flat_text(config: RunConfig) -> str:
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if isinstance(value, dict):
            for name, inner in value.items():
                lines.append(f"{key}.{name} = {_format(inner)}")
        else:
            lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def write_effective_config(config: RunConfig, directory: Union[str, os.PathLike]) -> None:
    """Escribe la configuración efectiva (texto plano y JSON) en el directorio de salida"""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, EFFECTIVE_CONFIG_TXT), "w", encoding="utf-8") as f:
        f.write(to_flat_text(config))
    with open(os.path.join(directory, EFFECTIVE_CONFIG_JSON), "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=2))
    logger.debug("Configuración efectiva escrita en %s", directory)
