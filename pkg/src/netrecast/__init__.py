"""Block-wise network recasting with a small numpy autodiff engine."""

from .blocks import Block, BlockSpec, basic, bottleneck, classifier, convolution, dense, transition
from .checkpoint import load_checkpoint, save_checkpoint
from .costmodel import CostReport, cost_report, count_activation_load, count_mults, count_params
from .data import BatchStream, Dataset, augment, load_dataset, synth_dataset, synth_splits
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DatasetFormatError,
    DegenerateVarianceError,
    PlanError,
    RecastError,
    ShapeError,
    SpecError,
    UsageError,
)
from .network import ArchSpec, Network, build_network, rebuild_next_block
from .optim import OptimizerConfig, ParamSet, optimizer_step
from .recast import (
    PlanEntry,
    RecastConfig,
    RecastPlan,
    kd_finetune,
    kd_loss,
    make_compression_plan,
    mse_activation_loss,
    parse_plan,
    recast_block_step,
    sequential_recast,
)
from .tensor import Tensor, backward, no_grad
from .training import evaluate, train_backprop, train_kd

__version__ = "0.1.0"
