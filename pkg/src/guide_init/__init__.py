"""Teacher-to-student transformer initialization by PCA-projected embeddings
and uniform weight selection, with a small numpy transformer to train and
distill the result."""
from .checkpoint import Checkpoint, ModelConfig, load, random_init, save
from .corpus import BatchStream, ByteTokenizer, encode_corpus
from .errors import (ConfigMismatch, CorruptCheckpoint, DivergenceError, InvalidInput,
                     NumericalFailure, ShapeError)
from .initializers import guide_init, initialize, lowrank_embed_init, uniform_init
from .selection import evenly_spaced_indices, select_layers, uniform_select
from .training import MetricLog, TrainConfig, evaluate, gap_reduction, train
from .transformer import forward, loss_and_grads

__version__ = "0.1.0"
