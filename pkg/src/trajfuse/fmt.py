"""Fixed numeric formatting shared by every CSV writer."""

from __future__ import annotations

import math
import numbers

import numpy as np


def fmt(v) -> str:
    """Six significant digits; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, numbers.Integral):
        return str(v)
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def parse_opt(text: str):
    text = text.strip()
    return None if text == "" else float(text)
