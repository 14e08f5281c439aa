from .data import (MULTI_DOMAIN_HOURS, Batch, DataSource, Sample, SourceShift,
                   generate_synthetic_sources, load_sources, random_shifts, save_sources)
from .masked import (MaskedPredictionModel, MaskedPredictionObjective, MaskSpec, RandomQuantizer,
                     apply_masking, masked_prediction_loss_grad, quantize_targets)
from .quadratic import (QuadraticSource, exact_hypergradient_quadratic,
                        first_order_hypergradient_quadratic, quadratic_loss_grad,
                        quadratic_trajectory)

__all__ = [
    "MULTI_DOMAIN_HOURS", "Batch", "DataSource", "Sample", "SourceShift",
    "generate_synthetic_sources", "load_sources", "random_shifts", "save_sources",
    "MaskedPredictionModel", "MaskedPredictionObjective", "MaskSpec", "RandomQuantizer",
    "apply_masking", "masked_prediction_loss_grad", "quantize_targets",
    "QuadraticSource", "exact_hypergradient_quadratic", "first_order_hypergradient_quadratic",
    "quadratic_loss_grad", "quadratic_trajectory",
]
