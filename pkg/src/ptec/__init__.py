"""Bilevel self-supervised pre-training over heterogeneous sources."""

from .batching import EpochPlan, epoch_plan, schedule_batches
from .checkpoint import Checkpoint, config_digest, load_checkpoint, save_checkpoint
from .diffcore import CheckReport, SourceObjective, finite_diff_grad, grad_check
from .evaluation import (AdaptationReport, adapt, adapt_and_eval, compare_runs,
                         evaluate_checkpoint, mean_post_adaptation_loss)
from .metrics import MetricsRecord, read_metrics, write_metrics
from .optim import AdamWState, LrSchedule, OptimizerChoice, adamw_step, lr_at, sgd_step
from .trainer import (CsslConfig, PtecConfig, TrainState, cssl_step, cssl_train,
                      mutual_init_rounds, ptec_iteration, ptec_train, solve_lower)

__version__ = "0.1.0"
