"""EVE: a layer of variational neurons with per-unit Gaussian latents,
capacity-band control, latent autoregression and neuron-level diagnostics."""
from ._accel import BACKEND
from .control import ControlConfig
from .data import Dataset
from .diagnostics import EpochDiagnostics, RunRecord
from .layer import EveLayerParams, ForwardTrace, LayerConfig
from .temporal import ARConfig
from .trainer import LossBreakdown, TrainConfig, fit, multi_seed

__version__ = "0.1.0"
