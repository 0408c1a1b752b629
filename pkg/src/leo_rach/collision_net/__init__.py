"""Convolutional preamble-collision classifier: data, model, training, evaluation."""

from .dataset import WindowDataset, gen_dataset, load_dataset, save_dataset, stratified_split
from .evaluation import ConfusionMatrix, EvalReport, evaluate, evaluate_by_snr
from .model import ClassifierArch, MlpArch, Network, forward, load_weights, save_weights
from .training import TrainConfig, grad_check, train

__all__ = [
    "ClassifierArch", "ConfusionMatrix", "EvalReport", "MlpArch", "Network", "TrainConfig",
    "WindowDataset", "evaluate", "evaluate_by_snr", "forward", "gen_dataset", "grad_check",
    "load_dataset", "load_weights", "save_dataset", "save_weights", "stratified_split", "train",
]
