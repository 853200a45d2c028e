"""Gradient-based multi-directional latent controls with saliency masking."""

from .classifier import (AttributeClassifier, AttributeSpec, LabeledLatent, TrainConfig,
                         forward, gradient_row, input_jacobian, train)
from .control import (DisentangleSpec, StepPolicy, StopReason, Trajectory,
                      disentangled_direction, manipulate, saliency, step,
                      sweep_exclusion_counts, top_c_dims)
from .numeric import Rng
from .synthworld import WorldSpec, default_world, oracle_score, sample_bank

__version__ = "0.1.0"
