"""Resolvable expressive capacity of sub-Rayleigh imaging measurements."""

__version__ = "0.1.0"

from .modes import Grid, ModeFunction, OrthoBasis, PsfModel, gram_schmidt_joint, gram_schmidt_single
from .scene import CompactSource, Scene, SceneGeneratorConfig, generate_scene, moments
from .povm import Povm, build_povm, coefficient_tensor, exact_probabilities, moment_probabilities
from .rec import PriorEnsemble, RecSpectrum, build_dg, build_dg_series, solve_spectrum, total_rec
from .sampling import CountVector, empirical_probs, sample_counts
from .learn import ClassifierModel, FeatureScaler, TaskDataset, TrainConfig, train_softmax
from .discrim import Hypothesis, chernoff_exponent, likelihood_ratio_decide

__all__ = [
    "Grid", "ModeFunction", "OrthoBasis", "PsfModel", "gram_schmidt_joint", "gram_schmidt_single",
    "CompactSource", "Scene", "SceneGeneratorConfig", "generate_scene", "moments",
    "Povm", "build_povm", "coefficient_tensor", "exact_probabilities", "moment_probabilities",
    "PriorEnsemble", "RecSpectrum", "build_dg", "build_dg_series", "solve_spectrum", "total_rec",
    "CountVector", "empirical_probs", "sample_counts",
    "ClassifierModel", "FeatureScaler", "TaskDataset", "TrainConfig", "train_softmax",
    "Hypothesis", "chernoff_exponent", "likelihood_ratio_decide",
]
