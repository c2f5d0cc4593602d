"""Lenient parsing of tool parameters

MCP clients sometimes send booleans and numbers as strings ("true", "10").
These helpers accept both spellings and fall back to a default when the
value cannot be read.
"""

from typing import Optional, Union

TRUE_WORDS = ("true", "1", "yes", "on")


def parse_bool_param(value: Union[bool, str, None], default: Optional[bool] = None) -> Optional[bool]:
    if value is None:
        return default
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in TRUE_WORDS
    return default


def parse_int_param(value: Union[int, str, None], default: Optional[int] = None) -> Optional[int]:
    if value is None or isinstance(value, bool):
        return default
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            return default
    return default


def parse_float_param(value: Union[float, int, str, None], default: Optional[float] = None) -> Optional[float]:
    if value is None or isinstance(value, bool):
        return default
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return default
    return default

