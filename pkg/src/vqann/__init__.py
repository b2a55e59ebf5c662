"""Composite quantization for approximate nearest neighbor search.

Dictionaries C_1..C_M are learned so that a vector is approximated by the sum of
one element from each; near-orthogonality of the dictionaries (a constant cross
term) lets query-to-code distances be computed with M table lookups.
"""

__version__ = "0.1.0"

from .baselines import Rotation, SubspaceLayout, train_ckm, train_pq
from .core import CodebookSet, icm_encode, icm_encode_batch, quantization_error, reconstruct
from .cq import TrainConfig, encode, select_mu, train_cq, train_nocq, train_ocq
from .data import Dataset, GroundTruth, brute_force_groundtruth, read_vecs, synth_mixture, write_vecs
from .model import QuantizerModel, load_model, save_model
from .multi_index import MultiIndex, build_multi_index, multi_index_search, multi_sequence
from .search import adc_search, build_distance_table, mean_average_precision, recall_at_r
from .sparse import SparseConfig, train_snocq
from .training import train_model

__all__ = [
    "CodebookSet", "Dataset", "GroundTruth", "MultiIndex", "QuantizerModel", "Rotation",
    "SparseConfig", "SubspaceLayout", "TrainConfig", "adc_search", "brute_force_groundtruth",
    "build_distance_table", "build_multi_index", "encode", "icm_encode", "icm_encode_batch",
    "load_model", "mean_average_precision", "multi_index_search", "multi_sequence",
    "quantization_error", "read_vecs", "recall_at_r", "reconstruct", "save_model", "select_mu",
    "synth_mixture", "train_ckm", "train_cq", "train_model", "train_nocq", "train_ocq",
    "train_pq", "train_snocq", "write_vecs",
]
