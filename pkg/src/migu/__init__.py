"""MIGU: magnitude-based gradient updating for continual learning, at desk scale."""

__version__ = "0.1.0"

from .exceptions import (ChecksumError, ConfigError, ContractError, MiguError, NumericError,
                         ShapeError, StateError, VersionError)
from .numerics import (SGD, AdamW, Linear, OptimState, adamw_step, check_gradients,
                       finite_diff_grad, matmul, relative_error, sgd_step)
from .masking import (PRESETS, ClusterConfig, GradMask, Instrument, MagnitudeCache, MiguConfig,
                      binary_top_t, cache_magnitudes, cluster_mask, cluster_weights, kmeans,
                      masked_update, n_masked, resolve_components)
from .lora import LoraAdapter, LoraLinear, lora_backward, lora_forward, lora_migu_masks
from .model import ModelConfig, TinyTransformer
from .harness import (METHODS, AccMatrix, ContinualLearner, Dataset, MethodConfig, PretrainSpec,
                      RunResult, TaskProvider, TaskSequence, TaskSpec, acc_metric, conflict_specs,
                      generate_task, make_order, run_method, train_sequence)
from .analysis import (SimilarityMatrix, SweepResult, TimingReport, export_distribution, export_heatmap,
                       overlap_ratio, similarity_matrix, task_masks, threshold_sweep, timing_report)
from .checkpoint import load_checkpoint, load_learner, save_checkpoint, save_learner
from .estimator import MiguClassifier
