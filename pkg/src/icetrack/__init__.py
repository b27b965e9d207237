"""icetrack: Bayesian glacier surface velocity from oblique time-lapse imagery.

Tracks points on a moving surface by combining a stochastic Lagrangian
motion model with template-matching likelihoods inside a particle
filter, fusing any number of imprecisely known cameras and reporting
full posterior uncertainty.

Modules: geometry (cameras, calibration, shake), motion (state model and
surface interpolant), imaging (preprocessing and matching likelihoods),
filter (the particle filter), pipeline (campaign orchestration), synth
(ground-truth scene generator), cli (command-line entry point).
"""

__version__ = "0.1.0"

from . import filter, geometry, imaging, motion  # noqa: F401

__all__ = ["geometry", "imaging", "motion", "filter", "__version__"]
