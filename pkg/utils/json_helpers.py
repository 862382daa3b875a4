import json
import math
from dataclasses import asdict, is_dataclass

import numpy as np


def to_native(obj):
    """
    Recursively turn numpy scalars/arrays, dataclasses and `to_dict()` reports
    into JSON-native values. NaN and ±Inf become null so reports stay strict JSON.
    """
    if hasattr(obj, 'to_dict'):
        return to_native(obj.to_dict())
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_native(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_native(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_native(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps(obj, **kwargs):
    return json.dumps(to_native(obj), allow_nan=False, **kwargs)
