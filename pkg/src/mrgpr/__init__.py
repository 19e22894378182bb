"""Model-reference control through a Gaussian-process plant inverse."""

from mrgpr.controller import HistoryBuffer, ModelReferenceController, MrGprController
from mrgpr.data_pipeline import Dataset, Episode
from mrgpr.gp_core import GpModel, Hyperparameters, TrainingPair, fit, posterior_mean, posterior_var
from mrgpr.plant import NormalFormPlant, PlantState, ReferenceModel, example_plant, rollout

__version__ = "0.1.0"
