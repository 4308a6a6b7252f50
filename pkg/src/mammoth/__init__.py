"""Multi-head soft mixture-of-experts layer for bag classification.

The core layer routes every instance of a bag softly into per-expert
slots, transforms the pooled slots with low-rank shared-factor experts,
and emits a fixed-size slot set for downstream aggregation; the package
also ships the baseline layers, MIL aggregators, a trainer, a synthetic
bag benchmark, metrics/interpretability protocols, an efficiency bench,
and a CLI wiring it all together.
"""

from .layer import MammothConfig, MammothLayer, slots_per_expert, solve_q
from .model import BagClassifier, build_layer, build_model
from .training import TrainConfig, train
from .data import Bag, SynthSpec

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagClassifier",
    "MammothConfig",
    "MammothLayer",
    "SynthSpec",
    "TrainConfig",
    "build_layer",
    "build_model",
    "slots_per_expert",
    "solve_q",
    "train",
    "__version__",
]
