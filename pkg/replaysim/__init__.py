from replaysim.classifier import *
from replaysim.continual import *
from replaysim.data import *
from replaysim.diffusion import *
from replaysim.errors import *
from replaysim.guidance import *
from replaysim.metrics import *
from replaysim.tensor import *

__all__ = [
    # Engine
    "Tensor", "Parameter", "backward", "no_grad",
    # Diffusion
    "NoiseSchedule", "make_linear_schedule", "q_sample", "predict_z0", "ddim_step", "ddim_timesteps",
    "DenoiserModel", "SamplerConfig", "sample", "train_diffusion",
    # Guidance
    "GuidanceVariant", "GuidanceConfig", "DualGuidanceConfig",
    "guide_epsilon", "select_target_class", "sample_rehearsal", "dual_guided_sample",
    # Classifier
    "ClassifierModel", "ProbeConfig", "fgsm_perturb", "boundary_flip_rate",
    # Continual protocol
    "Scenario", "Task", "TrainingConfig", "RunRecord",
    "build_balanced_batch", "refresh_rehearsal_cache", "train_task_classifier",
    "build_diffusion_dataset", "run_scenario", "train_joint_diffusion",
    # Data
    "DatasetSpec", "Generator", "LabeledDataset", "generate", "split_tasks",
    "save_dataset", "load_dataset",
    # Metrics
    "AccuracyMatrix", "avg_accuracy", "avg_forgetting", "knn_precision_recall", "export_embeddings",
    # Errors
    "ReplaySimError", "ConfigError", "ContractError", "DimensionError",
    "ScheduleIndexError", "TrainingError", "ProtocolError", "ArtifactError",
]
