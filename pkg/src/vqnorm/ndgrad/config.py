"""Global engine configuration: floating point precision."""

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}


def set_precision(name: str) -> None:
    """Select the engine-wide float type (``"f32"`` or ``"f64"``)."""
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[name]


def get_dtype():
    return _state["dtype"]


def get_precision() -> str:
    return "f64" if _state["dtype"] is np.float64 else "f32"


class precision:
    """Context manager that temporarily switches engine precision.

    >>> with precision("f64"):
    ...     ...
    """

    def __init__(self, name: str):
        self.name = name
        self._saved = None

    def __enter__(self):
        self._saved = get_precision()
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False
