"""Single-intersection traffic-signal control benchmark.

A deterministic, seedable microsimulator of a four-leg intersection, a
from-scratch dueling deep-Q agent with two action spaces, fixed-time and
actuated baselines behind one callback interface, a scenario library
covering demand surges, incidents and sensor failures, and an experiment
harness that reproduces learning curves, transfer runs and robustness
comparisons as CSV reports and figures.
"""

from signalbench.geometry import IntersectionGeometry
from signalbench.scenarios import ScenarioSpec, library
from signalbench.harness import run_episode, run_experiment, run_transfer

__version__ = "0.1.0"

__all__ = [
    "IntersectionGeometry",
    "ScenarioSpec",
    "library",
    "run_episode",
    "run_experiment",
    "run_transfer",
    "__version__",
]
