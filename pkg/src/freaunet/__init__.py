"""Frequency-aware attention U-net for MRI-to-PET image synthesis.

Self-contained desk-scale stack: float64 autodiff tensors, the encoder
decoder network with frequency branch heads and attention gates, Gaussian
band splitting, losses and image-quality metrics, a synthetic paired-data
generator, and a deterministic training/evaluation harness with a CLI.
"""

__version__ = "0.1.0"

from .tensor_core import Tensor, AdamState, adam_step, backward, no_grad
from .image_ops import (FrequencyPair, GaussianKernel, ImageFile, freq_merge,
                        freq_split, gaussian_blur, gaussian_kernel, normalize,
                        denormalize, read_image, write_image)
from .network import (ForwardOutput, FreaUnetModel, ModelConfig,
                      ablation_config, attention_apply, attention_scores,
                      build, forward, load_checkpoint, save_checkpoint)
from .objectives import (LossBreakdown, MetricsReport, body_mask, loss_high,
                         loss_low, loss_total, metric_mae, metric_psnr,
                         metric_ssim)
from .data_pipeline import (Dataset, FoldAssignment, OraclePredictor,
                            SamplePair, iterate, kfold_split, load_dataset,
                            oracle_transform, save_dataset, synth_generate)
from .trainer import (AblationResult, CVResult, RunRecord, TrainConfig,
                      TrainingDivergedError, ablate, cross_validate, evaluate,
                      train)
