"""Block movement pruning for small transformer encoders, on a numpy autodiff core."""
from .autodiff import Tensor, Tape, make_rng
from .compactor import CompactPlan, compact, hybrid_fill, plan, rewind, verify_equivalence
from .config import RunConfig, load_config
from .data import Dataset, TaskSpec, gen_synth, ingest_tsv
from .errors import (BlockPruneError, ConfigError, ContractError, DatasetError, DimensionError,
                     EquivalenceError, RunError)
from .model import Encoder, ModelConfig, linear_param_census
from .pruning import BlockPattern, attach_method, density_report
from .quantizer import quantize_model, quantize_tensor, dequantize
from .trainer import PruneSchedule, TrainRun, fine_prune, train_dense

__version__ = "0.1.0"
