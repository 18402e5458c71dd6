"""Federated learning under intertwined data and device heterogeneity:
a deterministic simulator with gradient-inversion compensation of stale
client updates, comparison baselines, and an experiment harness."""

from .baselines import (FirstOrderParams, WeightingParams, asyn_tiers_combine,
                        first_order_compensate, staleness_weight, w_pred_compensate)
from .config import (DataConfig, ExperimentConfig, PRESETS, SwitchConfig,
                     VariationConfig, load_config, parse_config_text, preset_config,
                     serialize_config)
from .data import (PartitionError, PartitionSpec, StalenessPlan, VariationSpec,
                   apply_variation, dirichlet_partition, load_csv_dataset, make_blobs,
                   select_stale_clients)
from .harness import (build_summary, compare_epochs_to_accuracy, read_metrics_csv,
                      run_preset, run_suite, summarize_dir, write_metrics_csv)
from .inversion import (GIConfig, GIResult, InversionError, SparsityMask, disparity,
                        estimate_unstale, invert, inversion_objective_value,
                        l1_distance, recovery_quality, simulated_local_delta,
                        top_k_mask)
from .nn import (ConfigError, Dataset, ModelArch, OptConfig, ParamVector, ShapeError,
                 finite_diff_grad, forward, init_params, load_checkpoint,
                 local_update, loss_and_grad, save_checkpoint)
from .sim import (AggregationError, GlobalState, METHODS, MetricsRecord, ModelUpdate,
                  RunResult, SnapshotRing, add_gaussian_noise, aggregate_fedavg,
                  evaluate, run_training)
from .switching import SwitchController, SwitchState
from .uniqueness import (CohortSnapshot, adaptive_threshold, cosine_distance,
                         is_unique)

__version__ = "0.1.0"
