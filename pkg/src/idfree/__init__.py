"""ID-free multimodal collaborative filtering on numpy/scipy."""
from .autodiff import Tape, Tensor, backward, precision
from .dataset import FeatureMatrix, InteractionSet, build_splits, load_features, load_interactions
from .model import AblationFlags, ModelConfig, ABLATION_ROWS, build_inputs, forward
from .sparse import SparseCSR
from .trainer import TrainConfig, train

__version__ = "0.1.0"
