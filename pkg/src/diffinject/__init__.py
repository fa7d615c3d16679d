"""Diffusion-based synthesis of bias-conflict samples for debiasing image classifiers."""

from .bias_bench import Dataset, DatasetSpec, generate_dataset, ingest_folder, load_dataset, save_dataset
from .classifiers import ClassifierConfig, evaluate, rank_by_ce_loss, train_bias_classifier, train_debiased_classifier
from .config import RunConfig, load_config
from .diffusion import NoiseSchedule, P2Config, UNet, default_schedule, make_schedule, train_diffusion
from .injector import InjectionConfig, compute_t_edit, ddim_invert, inject_h, reverse_with_injection, slerp
from .pipeline import Pipeline, run_experiment

__version__ = "0.1.0"
