"""Exception types raised by the fixed-point toolkit."""


class InvalidInput(ValueError):
    """Value outside a quantizer's documented input domain (non-finite, out of range)."""


class InvalidRescale(ValueError):
    """Rescale asked to increase the number of fractional bits (only down-shifts exist)."""


class QFormatError(ValueError):
    """No representable q-format for the requested range/width."""


class ShapeError(ValueError):
    """Tensor shape incompatible with the layer or model contract."""


class InvalidBN(ValueError):
    """Batch-norm parameters unusable (non-positive variance, shape mismatch)."""


class TooShort(ValueError):
    """Audio clip shorter than one analysis frame."""


class LayoutError(ValueError):
    """Malformed binary container (bad magic, truncated blob, header mismatch)."""


class ExportError(RuntimeError):
    """Model cannot be exported to integer form in the requested mode."""


class MetricError(ValueError):
    """Detection metrics undefined for the given score/label sets."""


class InvalidStep(ValueError):
    """Training step index outside [0, total_steps]."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted with diagnostics."""
