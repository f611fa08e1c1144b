"""Pixel contrastive-consistent semi-supervised segmentation, numpy only."""

from .data import (AugmentedPair, Sample, augment_pair, generate_dataset,
                   generate_sample, load_dataset, save_dataset, split)
from .losses import (IGNORE_LABEL, LossBreakdown, combine_losses,
                     consistency_loss, cosine_similarity,
                     image_contrastive_loss, output_ce_consistency,
                     pixel_contrastive_grad, pixel_contrastive_loss,
                     pixel_feature_consistency, softmax_sharpen, supervised_ce)
from .model import (NetConfig, ToyNet, load_checkpoint, save_checkpoint,
                    sgd_step)
from .sampling import (CandidatePool, STRATEGIES, density_combined,
                       density_diff_image, density_matrix, density_oracle,
                       density_pseudo_debiased, density_uniform,
                       false_negative_rate, fnr_benchmark, gumbel_topk,
                       gumbel_topk_rows, op_count)
from .trainer import (TrainConfig, ablate, evaluate_miou, run_training,
                      train_step)

__version__ = "0.1.0"
