"""Fixed-point QAT toolkit for small keyword-spotting convnets.

Train with simulated quantization in float arithmetic, export losslessly
to pure-integer form, and run bit-exact fixed-point inference with
low-bit saturating accumulators and instruction/saturation profiling.
"""

from .engine import (
    AccumulatorConfig,
    FxpModel,
    bit_exact_check,
    export_model,
    export_model_ptq,
    infer,
    instruction_profile,
    load_fxp_model,
    profile_saturations,
    save_fxp_model,
)
from .errors import (
    ExportError,
    InvalidBN,
    InvalidInput,
    InvalidRescale,
    InvalidStep,
    LayoutError,
    MetricError,
    QFormatError,
    ShapeError,
    TooShort,
    TrainingDiverged,
)
from .estimators import KeywordSpotter, LogMelTransformer
from .features import (
    FeatureDataset,
    build_gsc_dataset,
    build_synth_dataset,
    lfbe64,
    window76,
)
from .fxp import (
    Accumulator,
    FxpTensor,
    code_bounds,
    dequantize_qformat,
    dequantize_unit,
    quantize_qformat,
    quantize_unit,
    rescale,
    round_half_away,
    sat_add,
    select_qformat,
)
from .model import (
    ModelSpec,
    TrainedModel,
    default_spec,
    desk_spec,
    load_checkpoint,
    profile_spec,
    save_checkpoint,
    tiny_spec,
)
from .quantizers import FakeQuantConfig
from .trainer import (
    TrainConfig,
    det_metrics,
    eval_grid,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Accumulator",
    "AccumulatorConfig",
    "FakeQuantConfig",
    "FeatureDataset",
    "FxpModel",
    "FxpTensor",
    "KeywordSpotter",
    "LogMelTransformer",
    "ModelSpec",
    "TrainConfig",
    "TrainedModel",
    "bit_exact_check",
    "build_gsc_dataset",
    "build_synth_dataset",
    "code_bounds",
    "default_spec",
    "dequantize_qformat",
    "dequantize_unit",
    "desk_spec",
    "det_metrics",
    "eval_grid",
    "evaluate",
    "export_model",
    "export_model_ptq",
    "infer",
    "instruction_profile",
    "lfbe64",
    "load_checkpoint",
    "load_fxp_model",
    "profile_saturations",
    "profile_spec",
    "quantize_qformat",
    "quantize_unit",
    "rescale",
    "round_half_away",
    "sat_add",
    "save_checkpoint",
    "save_fxp_model",
    "select_qformat",
    "tiny_spec",
    "train",
    "window76",
    "ExportError",
    "InvalidBN",
    "InvalidInput",
    "InvalidRescale",
    "InvalidStep",
    "LayoutError",
    "MetricError",
    "QFormatError",
    "ShapeError",
    "TooShort",
    "TrainingDiverged",
    "__version__",
]
