from typing import Any, Dict, List, Union

from dynaseg.exceptions import DynaSegConfigError

ROOT_SECTION = "run"

Value = Union[int, float, bool, str, List[int], None]


class ConfigOverrideFactory:
    """Construye sobrescrituras de configuración a partir de flags opcionales

    Cada sobrescritura pertenece a una sección de `RunConfig` (`schedule`, `backbone`,
    `optimizer`, `loss`, `silhouette`, `train`); las claves de primer nivel (p. ej. `seed`)
    van en la sección `run`. Los valores `None` se omiten, así un flag no entregado en la
    línea de comandos no pisa lo que venga del archivo de configuración.

    Parámetros
        section: String que representa la sección inicial (opcional)

    Módo de uso
    ```py
        >>> (ConfigOverrideFactory().section("schedule").set("kind", "scf").set("alpha", None)
            .section("train").set("max_iters", 32)
            .parse())
        {
            "schedule": {"kind": "scf"},
            "train": {"max_iters": 32}
        }
    ```
    """

    def __init__(self, section: Union[str, None] = None):
        self._overrides: Dict[str, Dict[str, Any]] = {}
        self._last_section: Union[str, None] = None

        if section:
            self._set_section(section)

    def _cast_value(self, value: Value) -> Any:
        """Normaliza el valor antes de guardarlo

        Las listas se copian y los strings se recortan; el resto se deja tal cual para que
        pydantic lo valide al construir la configuración.
        """
        if isinstance(value, str):
            return value.strip()
        if isinstance(value, (list, tuple)):
            return list(value)
        return value

    def _set_section(self, section: str) -> None:
        self._last_section = section
        self._overrides.setdefault(section, {})

    def section(self, name: str) -> "ConfigOverrideFactory":
        """Cambia la sección activa

        Retorna:
            Este mismo objeto, con la sección activa cambiada
        """
        if self._last_section == name:
            return self

        self._set_section(name)
        return self

    def set(self, key: str, value: Value = None) -> "ConfigOverrideFactory":
        """Agrega una sobrescritura `key = value` a la sección activa

        Retorna:
            Este mismo objeto, pero con la sobrescritura añadida

        Errores:
            `dynaseg.exceptions.DynaSegConfigError`: No se ha configurado una sección con `.section()`.
        """
        if self._last_section is None:
            raise DynaSegConfigError("Debes establecer una sección usando .section() antes de agregar un valor")

        if value is None:
            return self

        self._overrides[self._last_section][key] = self._cast_value(value)
        return self

    def parse(self) -> Dict[str, Dict[str, Any]]:
        """Retorna las sobrescrituras agrupadas por sección

        Omite las secciones sin valores

        Errores:
            `dynaseg.exceptions.DynaSegConfigError`: No se ha configurado ninguna sección.
        """
        if len(self._overrides) == 0:
            raise DynaSegConfigError("No se ha proporcionado ninguna sección para las sobrescrituras")

        return {key: dict(values) for key, values in self._overrides.items() if len(values) > 0}

    def as_nested(self) -> Dict[str, Any]:
        """Igual que `parse` pero con la sección `run` aplanada al primer nivel, listo para `RunConfig`"""
        parsed = self.parse()
        nested: Dict[str, Any] = dict(parsed.pop(ROOT_SECTION, {}))
        nested.update(parsed)
        return nested
