"""Two-stage heterogeneous cascade for multivariate flight-series diagnosis.

A global-attention screening model separates healthy from anomalous flights;
flights routed onward are classified by a multi-kernel convolutional fault
model.  The package also carries the keyness branch (a distilled temporal
saliency encoder with healthy-baseline retrieval), the cost-weighted
diagnosis metric, and a reproducible CLI pipeline.
"""

from .schema import (
    ANOMALOUS,
    HEALTHY,
    ChannelSchema,
    ChannelSpec,
    DEFAULT_SCHEMA,
    FlightSample,
    FoldPlan,
    LabeledDataset,
    NormStats,
)
from .backbones import ConvTokConfig, ConvTokMHSA, MMKConfig, MMKNet
from .cascade import DiagnosisOutput, batch_diagnose, diagnose, route_and_assemble
from .config import RunConfig
from .metrics import ConfusionMatrix, classification_metrics, mcwpm
from .synth import SynthSpec, synth_generate

__version__ = "0.1.0"

__all__ = [
    "ANOMALOUS",
    "HEALTHY",
    "ChannelSchema",
    "ChannelSpec",
    "ConfusionMatrix",
    "ConvTokConfig",
    "ConvTokMHSA",
    "DEFAULT_SCHEMA",
    "DiagnosisOutput",
    "FlightSample",
    "FoldPlan",
    "LabeledDataset",
    "MMKConfig",
    "MMKNet",
    "NormStats",
    "RunConfig",
    "SynthSpec",
    "batch_diagnose",
    "classification_metrics",
    "diagnose",
    "mcwpm",
    "route_and_assemble",
    "synth_generate",
    "__version__",
]
