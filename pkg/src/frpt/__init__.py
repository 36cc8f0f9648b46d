"""Post-training of small CNN classifiers via backward feature-map
reconstruction: label embeddings, per-layer equality-constrained and
least-squares solves, and an FFT route through convolutions.
"""

__version__ = "0.1.0"

from .data import LabeledDataset, instance_normalize, load_idx, synth_dataset
from .embedding import EmbeddingResult, max_assignment, nearest_embedding, one_hot_embedding
from .estimators import ConvNetClassifier, ReconPostTrainer
from .network import (
    Activation,
    AdamState,
    ForwardTrace,
    LayerUnit,
    Network,
    build_network,
    compute_loss,
    evaluate,
    forward_trace,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .posttrain import (
    PostTrainConfig,
    SweepReport,
    build_recon_dataset,
    deviation_heatmap,
    pretrain,
    run_posttrain,
)
from .reconstruct import (
    ReconDataset,
    ReconTrace,
    load_recon_dataset,
    reconstruct_chain,
    reconstruct_conv,
    reconstruct_linear,
    reverse_activation,
    reverse_pool,
    save_recon_dataset,
)

__all__ = [
    "__version__",
    "LabeledDataset", "instance_normalize", "load_idx", "synth_dataset",
    "EmbeddingResult", "max_assignment", "nearest_embedding", "one_hot_embedding",
    "ConvNetClassifier", "ReconPostTrainer",
    "Activation", "AdamState", "ForwardTrace", "LayerUnit", "Network",
    "build_network", "compute_loss", "evaluate", "forward_trace",
    "load_checkpoint", "save_checkpoint", "train_step",
    "PostTrainConfig", "SweepReport", "build_recon_dataset",
    "deviation_heatmap", "pretrain", "run_posttrain",
    "ReconDataset", "ReconTrace", "load_recon_dataset", "reconstruct_chain",
    "reconstruct_conv", "reconstruct_linear", "reverse_activation",
    "reverse_pool", "save_recon_dataset",
]
