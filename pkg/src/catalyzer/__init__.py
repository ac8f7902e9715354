"""Spread-out feature learning for lattice and binary similarity-search codes."""

from .binarycodes import binarize, hamming_search, lsh_basis, pca_fit
from .lattice import LatticeCodebook
from .losses import combined, koleo, triplet
from .neuralnet import Catalyzer, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"
