"""Debiasing small classifiers with hybrid bias-conflicting samples."""

from .datagen import DatasetSpec, LabeledDataset, generate_dataset, make_unbiased_test, read_dataset, reduce_dataset, write_dataset
from .debias import DebiasConfig, train
from .evaluation import EvalReport, accuracy
from .experiment import ExperimentConfig, RunReport, run_experiment, sweep

__version__ = "0.1.0"
