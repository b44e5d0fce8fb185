"""Goal-conditioned navigation policies for an omnidirectional robot.

Velocity-model identification, a kinematic simulator with a perturbed
surrogate, SAC with hindsight relabelling and a tolerance curriculum,
a gated multi-stage pipeline, and sub-goal path following.
"""
__version__ = "0.1.0"

from rlpipe._accel import BACKEND, HAS_NUMBA  # noqa: F401
