"""Utility modules shared by the CLI, the tool server and the pipeline stages"""

from .common import parse_bool_param, parse_float_param, parse_int_param
from .run_manager import RunManager

__all__ = ["RunManager", "parse_bool_param", "parse_float_param", "parse_int_param"]
