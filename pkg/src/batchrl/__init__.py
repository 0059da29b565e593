"""Batch-to-batch reinforcement learning for batch process control."""

from .batch2batch import B2BConfig, offline_phase, online_phase, run_pipeline, transfer_freeze
from .config import RunConfig, parse_config
from .estimators import BatchToBatchPolicy, ReinforcePolicy, ShrinkingHorizonNMPC
from .evaluation import EvalReport, summarize
from .exceptions import BatchRLError, ConfigurationError, DomainError, GraphStateError, IntegrationError
from .harness import emit_plot_data, evaluate
from .plants import make_plant
from .policy import PolicyConfig, PolicyParams, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
