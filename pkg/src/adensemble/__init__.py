"""From-scratch CNN engine and pipeline for four-class dementia-stage MRI classification.

Two compact networks (IR-BRAINNET, Modified-DEMNET) are trained with Adam and
combined by averaging their softmax outputs.
"""
from .architectures import (CLASS_NAMES, ModelGraph, build_ir_brainnet, build_modified_demnet,
                            flop_count, forward, kaiming_init, memory_bytes, param_count, predict)
from .archive import WeightArchive
from .evaluation import ensemble_average, metrics, roc_auc, wilcoxon_signed_rank
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "ModelGraph", "TrainConfig", "WeightArchive", "build_ir_brainnet",
    "build_modified_demnet", "ensemble_average", "fit", "flop_count", "forward", "kaiming_init",
    "memory_bytes", "metrics", "param_count", "predict", "roc_auc", "wilcoxon_signed_rank",
]
