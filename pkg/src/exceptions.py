"""
Exception hierarchy shared by every layer.

`RangeSegError` and its subclasses describe user-facing problems (bad files,
bad configs, contract violations) and map to CLI exit code 1. Anything else
escaping `main.py` is treated as an internal error (exit code 2).
"""


class RangeSegError(Exception):
    """Base class for all user-facing errors."""


class MalformedFile(RangeSegError):
    pass


class EmptyScan(RangeSegError):
    pass


class LengthMismatch(RangeSegError):
    pass


class NotARigidTransform(RangeSegError):
    pass


class MissingSensor(RangeSegError):
    pass


class InvalidSpec(RangeSegError):
    pass


class InvalidConfig(RangeSegError):
    pass


class ZeroRange(RangeSegError):
    pass


class FrameMismatch(RangeSegError):
    pass


class MissingNormals(RangeSegError):
    pass


class CheckpointError(RangeSegError):
    pass


class ShapeMismatch(RangeSegError):
    """Raised by tensor ops and the network when shapes do not conform."""

    def __init__(self, op: str, shape_a, shape_b=None, detail: str = ""):
        msg = f"{op}: shape {tuple(shape_a)}"
        if shape_b is not None:
            msg += f" vs {tuple(shape_b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b) if shape_b is not None else None


class DivergenceDetected(RangeSegError):
    """Non-finite training loss. Carries the offending batch id."""

    def __init__(self, batch_id: int, loss_value: float):
        super().__init__(f"non-finite loss {loss_value} at batch {batch_id}")
        self.batch_id = batch_id
        self.loss_value = loss_value
