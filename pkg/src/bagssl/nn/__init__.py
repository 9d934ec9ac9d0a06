from .checkpoint import load_checkpoint, load_model, load_table, save_checkpoint, save_model, save_table
from .layers import TensorBuffer
from .model import LayerSpec, Model, Tape, format_layer_specs, parse_layer_specs
from .optim import OptimState

__all__ = [
    "LayerSpec",
    "Model",
    "OptimState",
    "Tape",
    "TensorBuffer",
    "format_layer_specs",
    "load_checkpoint",
    "load_model",
    "load_table",
    "parse_layer_specs",
    "save_checkpoint",
    "save_model",
    "save_table",
]
