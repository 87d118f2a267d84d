"""Mixture of interaction experts for multimodal classification and regression.

A small numpy library: a tape-based autodiff core, the expert/reweighter
model, interaction losses built from masked forward passes, synthetic
interaction datasets with a discrete information-decomposition oracle,
training/evaluation protocols, and interpretation reports.
"""
__version__ = "0.1.0"

from .diffcore import Tape, check_gradients  # noqa: E402
from .model import ExpertKind, FusionBaseline, InteractionMoE, ModelConfig, combine  # noqa: E402
from .pidoracle import DiscreteJoint, classify_dominant, pid_decompose  # noqa: E402
from .synthdata import GenSpec, MultimodalDataset, generate, read_dataset, write_dataset  # noqa: E402
from .trainer import TrainConfig, evaluate, run_seeds, train_run  # noqa: E402
from .interpret import agreement_analysis, global_report, local_report  # noqa: E402

__all__ = [
    "Tape", "check_gradients", "ExpertKind", "FusionBaseline", "InteractionMoE", "ModelConfig",
    "combine", "DiscreteJoint", "classify_dominant", "pid_decompose", "GenSpec",
    "MultimodalDataset", "generate", "read_dataset", "write_dataset", "TrainConfig", "evaluate",
    "run_seeds", "train_run", "agreement_analysis", "global_report", "local_report",
]
