"""Federated fall detection with attention-driven selective parameter upload."""

from .data import (ClientDataset, GeneratorSpec, KeypointSequence, apply_confidence_mask,
                   generate_synthetic, partition_non_iid, sample_frames, split_train_val_test)
from .federation import (FedConfig, GlobalState, TransmissionPacket, aggregate, local_train,
                         run_centralized, run_federated, select_for_transmission)
from .metrics import ConfusionMatrix, MetricReport, confusion, report
from .model import (PAPER_PROFILE, TOY_PROFILE, AttentionStats, KeypointTransformer,
                    ModelConfig, count_parameters, init_params)

__version__ = "0.1.0"
