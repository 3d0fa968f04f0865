"""robustlab: adversarial robustness toolkit.

lp, patch, and frame attacks built on a shared APGD core; a parametric
ResNet-to-ConvNeXt architecture ladder plus ViT/XCA transformer families;
single-step adversarial training with collapse detection; attention and
perturbation interpretability maps; and a multi-threat robustness sweep.
"""

from .attacks import (APGDConfig, AttackOutcome, LossSpec, ThreatModel, apgd,
                      fgsm, merge_outcomes, pgd0, sparse_random_search)
from .data import (ArrayDataset, DatasetSpec, generate_synthetic_dataset,
                   load_dataset, split_dataset)
from .errors import (CatastrophicOverfitting, ConfigurationError,
                     RobustlabError, TrainingDiverged)
from .interpret import (HeadMapSet, cls_attention_maps,
                        grid_discontinuity_statistic, perturbation_heatmap,
                        xca_feature_norm_maps)
from .models import (ModelConfig, ModelHandle, apply_ladder_step, build_model,
                     gradient_wrt_input, list_ladder, load_checkpoint,
                     save_checkpoint)
from .patches import (FrameMask, PatchGrid, Placement, enumerate_placements,
                      fixed_position_patch_attack, frame_attack,
                      greedy_patch_attack, patch_loss_map,
                      render_loss_map_pair)
from .sweep import (AttackBudget, RobustnessReport, SweepConfig, desk_threats,
                    format_report, robust_accuracy, run_sweep, worst_case)
from .training import (PRESETS, TrainConfig, TrainHistory, adversarial_train,
                       detect_catastrophic_overfitting, inner_maximization,
                       preset, select_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "APGDConfig", "ArrayDataset", "AttackBudget", "AttackOutcome",
    "CatastrophicOverfitting", "ConfigurationError", "DatasetSpec",
    "FrameMask", "HeadMapSet", "LossSpec", "ModelConfig", "ModelHandle",
    "PRESETS", "PatchGrid", "Placement", "RobustlabError",
    "RobustnessReport", "SweepConfig", "ThreatModel", "TrainConfig",
    "TrainHistory", "TrainingDiverged", "adversarial_train", "apgd",
    "apply_ladder_step", "build_model", "cls_attention_maps", "desk_threats",
    "detect_catastrophic_overfitting", "enumerate_placements", "fgsm",
    "fixed_position_patch_attack", "format_report", "frame_attack",
    "generate_synthetic_dataset", "gradient_wrt_input", "greedy_patch_attack",
    "grid_discontinuity_statistic", "inner_maximization", "list_ladder",
    "load_checkpoint", "load_dataset", "merge_outcomes", "patch_loss_map",
    "perturbation_heatmap", "pgd0", "preset", "render_loss_map_pair",
    "robust_accuracy", "run_sweep", "save_checkpoint", "select_checkpoint",
    "sparse_random_search", "split_dataset", "worst_case",
    "xca_feature_norm_maps",
]
