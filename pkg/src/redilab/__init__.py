"""Retrieval-based skipping of probability-flow ODE steps on an analytic diffusion model."""
from .kb import KnowledgeBase, build_kb, load_kb, save_kb
from .model import Condition, MixtureModel
from .redi import RediConfig, infer, infer_adapted
from .schedule import Schedule, make_grid
from .solver import SolverMethod, solve

__version__ = "0.1.0"
