"""Type-aware embeddings for outfit compatibility.

Items live in one general embedding space; each pair of item types gets its
own projection where compatibility is measured.
"""

from .data import (Dataset, SplitAssignment, SyntheticSpec, disjoint_split, generate_synthetic,
                   load_dataset, load_split, oracle_score, outfit_split, save_dataset, save_split)
from .evaluation import EvalReport, FitbQuestion, auc_brute_force, auc_from_scores, evaluate
from .model import (EmbeddingModel, Hyperparams, ItemRecord, ModelParams, Outfit, TypePair,
                    outfit_score, pair_distance, pair_score)
from .objectives import LossBreakdown, TripletBatch, TripletSpec, loss_gradients, total_loss
from .query import QueryResult, compatible_diverse, interchangeable, recursive_swap, replace_item
from .trainer import Checkpoint, TrainConfig, fit, load_checkpoint, sample_triplet, save_checkpoint

__version__ = "0.1.0"
