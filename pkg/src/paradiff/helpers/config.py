"""Loading of TOML configuration files into the package's config dataclasses."""

from __future__ import annotations

import dataclasses
import sys

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from typing_extensions import get_args, get_origin, get_type_hints

from paradiff.helpers.exceptions import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

_DataclassT = TypeVar("_DataclassT")


def read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a TOML file into a dictionary.

    Args:
        path: The file to read.

    Returns:
        The parsed document.

    Raises:
        ConfigError: The file does not exist or is not valid TOML.
    """
    path = Path(path)
    try:
        with path.open("rb") as file:
            return tomllib.load(file)
    except FileNotFoundError as error:
        msg = f"Config file not found: {path}"
        raise ConfigError(msg) from error
    except tomllib.TOMLDecodeError as error:
        msg = f"Invalid TOML in {path}: {error}"
        raise ConfigError(msg) from error


def table(document: Mapping[str, Any], dotted_name: str) -> Optional[Dict[str, Any]]:
    """Return a (possibly nested) table of a parsed document, or None when it is absent.

    Examples:
        >>> table({"train": {"ar": {"lr": 0.1}}}, "train.ar")
        {'lr': 0.1}

    Args:
        document: The parsed TOML document.
        dotted_name: The table name, nested tables separated by dots.

    Returns:
        The table or None.

    Raises:
        ConfigError: The name refers to a value that is not a table.
    """
    node: Any = document
    for part in dotted_name.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return None
        node = node[part]  # pyright: ignore[reportUnknownVariableType]
    if not isinstance(node, Mapping):
        msg = f"[{dotted_name}] must be a table"
        raise ConfigError(msg)
    return dict(node)  # pyright: ignore[reportUnknownArgumentType]


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    origin = get_origin(annotation)
    if origin is Union:
        members = [arg for arg in get_args(annotation) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(value, members[0], where)
    if isinstance(annotation, type) and issubclass(annotation, Enum):
        if isinstance(value, annotation):
            return value
        try:
            return annotation(value)
        except ValueError:
            choices = ", ".join(str(member.value) for member in annotation)
            msg = f"{where}: {value!r} is not one of {choices}"
            raise ConfigError(msg) from None
    if origin is tuple and isinstance(value, (list, tuple)):
        args = get_args(annotation)
        item_type = args[0] if args else Any
        return tuple(_coerce(item, item_type, where) for item in value)  # pyright: ignore[reportUnknownVariableType]
    if annotation is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_dataclass(
    cls: Type[_DataclassT], values: Optional[Mapping[str, Any]], *, where: str = ""
) -> _DataclassT:
    """Create a config dataclass from a TOML table.

    Enum fields accept their values, tuple fields accept arrays and integer literals are accepted
    for float fields. Unknown keys are rejected so that typos do not pass silently.

    Args:
        cls: The dataclass type to create.
        values: The table contents, None uses the defaults of every field.
        where: The table name used in error messages.

    Returns:
        The new dataclass instance, validated by its own `__post_init__`.

    Raises:
        ConfigError: The table has unknown keys or values of the wrong kind.
    """
    if not dataclasses.is_dataclass(cls):  # pragma: no cover
        msg = f"{cls!r} is not a dataclass"
        raise TypeError(msg)
    values = dict(values or {})
    hints = get_type_hints(cls)
    known = {field.name for field in dataclasses.fields(cls) if field.init}
    unknown = sorted(set(values) - known)
    if unknown:
        msg = f"[{where or cls.__name__}] has unknown keys: {', '.join(unknown)}"
        raise ConfigError(msg)
    kwargs = {
        name: _coerce(value, hints[name], f"[{where or cls.__name__}] {name}")
        for name, value in values.items()
    }
    try:
        return cls(**kwargs)
    except TypeError as error:
        msg = f"[{where or cls.__name__}] {error}"
        raise ConfigError(msg) from error


def dataclass_to_table(instance: Any) -> Dict[str, Any]:
    """Convert a config dataclass into plain JSON/TOML compatible values.

    Args:
        instance: The dataclass instance.

    Returns:
        A dictionary in which enums are replaced by their values and tuples by lists.
    """

    def _plain(value: Any) -> Any:
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, (list, tuple)):
            return [_plain(item) for item in value]  # pyright: ignore[reportUnknownVariableType]
        if isinstance(value, Mapping):
            return {str(key): _plain(item) for key, item in value.items()}  # pyright: ignore[reportUnknownVariableType,reportUnknownArgumentType]
        return value

    return {
        field.name: _plain(getattr(instance, field.name))
        for field in dataclasses.fields(instance)
    }
