"""Extreme-value preserving networks on a small numpy autodiff core."""

from .attacks import AttackSpec, adversarial_accuracy, evaluate_robustness, fgsm, pgd, rfgsm
from .data import DatasetHandle, load_cifar10, load_dataset, synth_shapes
from .models import ModelConfig, ModelGraph, build, load_model, save_model
from .tensor import Parameter, Tape, Tensor, precision
from .train import TrainLog, TrainSpec, train

__version__ = "0.1.0"
