"""Contrastive-weighted ranking losses for implicit-feedback recommendation.

MF, LightGCN and XSimGCL backbones trained in numpy with sampled softmax
style losses (SL, BSL, PSL, BPR), the positive-unlabeled corrected loss,
the weighted loss and their combination CW.
"""

from .backbones import BackboneConfig, EmbeddingTable, Recommender
from .config import ExperimentConfig
from .data import InteractionDataset, SplitDataset, preprocess, split_dataset
from .evaluation import RankingReport, evaluate
from .losses import LossConfig, compute_loss
from .optim import OptimConfig, SamplerConfig, TrainSchedule, train
from .sampling import PriorEstimate, estimate_prior

__version__ = "0.1.0"
