"""Particle-filter localization on semantic grid maps with map-assisted
object recognition."""

from .filter import FilterState, ObjectPosterior
from .models import MODES, Hyperparameters, particle_log_likelihood
from .semantic_map import INDOOR_CLASSES, ClassTable, Pose2D, SemanticGridMap

__version__ = "0.1.0"

__all__ = ["FilterState", "ObjectPosterior", "MODES", "Hyperparameters",
           "particle_log_likelihood", "INDOOR_CLASSES", "ClassTable", "Pose2D",
           "SemanticGridMap", "__version__"]
