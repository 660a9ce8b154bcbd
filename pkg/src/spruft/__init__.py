"""Row-sparse fine-tuning: adapters, neuron importance, zeroth-order gradients and memory accounting."""

from .adapters import (ColumnAdapter, LoRAAdapter, RowAdapter, RowSelection, VectorAdapter, adapted_forward,
                       build_lora_adapter, build_row_adapter, lora_forward, merge, merge_model)
from .importance import (SPSAConfig, magnitude_importance, qm_taylor, quantiles_mean, select_top_r,
                         taylor_importance, zo_taylor)
from .layers import LabeledBatch, ModelSpec, tiny_mlp, toy_transformer
from .memory import compare_configurations, measure_training_footprint
from .tensor import ContractError, ShapeError, Tape, Tensor, backward
from .trainer import SynthTaskSpec, TrainablePlan, TrainConfig, make_synth_task, train

__version__ = "0.1.0"
