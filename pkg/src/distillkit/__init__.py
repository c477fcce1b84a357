"""Teacher-student distillation for recognition from half-occluded faces.

Modules: ``autograd`` (reverse-mode differentiation on numpy), ``nn``
(network specs, parameters, forward pass), ``data`` (datasets, occlusion,
synthetic task), ``losses``, ``mining`` (offline hard triplets), ``trainer``
(three-stage curriculum), ``ensemble`` (linear margin models on embeddings),
``metrics``, ``config``/``experiment``/``cli`` (the command-line harness) and
``estimator`` (a scikit-learn style wrapper).
"""

from .data import DatasetSplit, generate_synthetic, load_directory, occlude, save_directory
from .ensemble import EmbeddingSet, MarginClassifier, MarginRegressor, ensemble_predict, fit_margin_model
from .estimator import OcclusionDistiller
from .losses import DistillConfig
from .metrics import EvalReport, accuracy, mae, mcnemar_test, weighted_accuracy
from .mining import MiningConfig, mine_epoch
from .nn import NetworkSpec, build, forward, preset
from .trainer import RunConfig, run_curriculum

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "generate_synthetic", "load_directory", "occlude", "save_directory",
    "EmbeddingSet", "MarginClassifier", "MarginRegressor", "ensemble_predict", "fit_margin_model",
    "OcclusionDistiller", "DistillConfig", "EvalReport", "accuracy", "mae", "mcnemar_test",
    "weighted_accuracy", "MiningConfig", "mine_epoch", "NetworkSpec", "build", "forward", "preset",
    "RunConfig", "run_curriculum",
]
