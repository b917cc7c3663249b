"""Desk-scale laboratory for cross-domain mixing and multi-level contrastive self-training.

The package builds procedurally generated paired-domain segmentation benchmarks,
trains a miniature student/teacher segmentation network with class mixing,
high-confidence target mixing and probability-space contrastive losses, and
ships an ablation/analysis harness with a CLI front end.
"""

from uda_mixlab.synthgen import (
    DomainSpec,
    LabeledImage,
    DatasetPair,
    generate_scene,
    make_benchmark,
    ignore_id,
)
from uda_mixlab.model import ArchSpec, SegModel, TeacherState, init_params, ema_update
from uda_mixlab.pseudo import PseudoLabel, pseudo_label, confidence_mask, class_confidence_mask
from uda_mixlab.mix import MixedSample, sample_classmix_mask, compose_mixed_sample, new_boundary_mask
from uda_mixlab.contrast import (
    LossResult,
    PrototypeSet,
    compute_prototypes,
    prob_similarity,
    proto_contrastive_loss,
    pixel_contrastive_loss,
)
from uda_mixlab.train import TrainConfig, TrainState, ce_seg_loss, total_loss, poly_lr, warmup, train_step
from uda_mixlab.evaluate import EvalReport, compute_miou, boundary_error_stats
from uda_mixlab.experiment import run_ablation, run_experiment, run_training

__version__ = "0.1.0"
