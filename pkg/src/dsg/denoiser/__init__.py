from .base import Denoiser, DenoiserOutput
from .losses import LossBreakdown, TrainConfig, class_weights, giou, loss
from .network import MessagePassingDenoiser
from .oracle import TabularBayesOracle, dataset_from_batch
from .training import Checkpoint, gradient_check, train
