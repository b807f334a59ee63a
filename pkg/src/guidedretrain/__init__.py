"""Metric-guided retraining of small CNNs against FGSM adversarial inputs."""

from .attack import AttackConfig, AugmentedSets, build_adv_train, build_augmented_sets, fgsm
from .autodiff import (
    Conv2D,
    Dense,
    GradientBundle,
    Graph,
    GraphError,
    MaxPool2D,
    Relu,
    backward_grads,
    forward_eval,
    sgd_step,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import generate_synthetic, load_idx_dataset, save_idx_dataset
from .metrics import (
    GuidanceConfig,
    GuidanceScore,
    NCConfig,
    dsa_score,
    fit_dsa,
    fit_lsa,
    lsa_score,
    nc_score,
    order_inputs,
    random_score,
    timed_scoring,
)
from .model import (
    ActivationTrace,
    ArchitectureDescriptor,
    Dataset,
    ModelState,
    TrainParams,
    accuracy,
    activation_trace,
    build_model,
    desk_architecture,
    load_model,
    predict,
    save_model,
    train,
)
from .reports import ReportBundle, compute_trend, run_pipeline
from .retrain import (
    ExperimentRecord,
    RetrainHP,
    RetrainRun,
    SweepPlan,
    compare_records,
    retrain_point,
    run_experiment,
    sweep_sizes,
)

__version__ = "0.1.0"
