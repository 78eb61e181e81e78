"""Stochastic hybrid filtering for maneuvering GEO objects tracked with optical attributables."""
from .orbits import CartesianState, MeeState
from .forces import ForceModelConfig
from .observation import Attributable, SensorSite
from .admissible_region import RegionThresholds, build_region
from .shf import FilterConfig, ShfSession
from .baseline_mhe import MovingHorizonEstimator
from .scenario import ScenarioConfig, run_end_to_end, simulate_truth, generate_tracks

__version__ = "0.1.0"
