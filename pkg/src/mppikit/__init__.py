"""Sampling-based model predictive control on the CPU: MPPI, DMD-MPC, CEM and Tube-MPPI."""
import os

# Prefer the OpenMP threading layer: it is thread-safe for concurrent parallel
# calls and avoids numba's warning about an outdated TBB.
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

from .controllers import (CEMController, ControllerSolution, DMDMPCController, MPPIController,  # noqa: E402
                          TubeMPPIController, make_controller)
from .core import (ConfigError, ControlTrajectory, ModelDims, NonFiniteError, OutputTrajectory,  # noqa: E402
                   ScenarioConfig, load_scenario, parse_scenario, validate)
from .costs import CircleTrackCost, Costmap2D, DiffDriveNavCost, QuadraticCost, RoadCost, make_cost  # noqa: E402
from .dynamics import Cartpole, DiffDrive, DoubleIntegrator2D, Unicycle, make_dynamics  # noqa: E402
from .engine import (RolloutEngine, RolloutRequest, RolloutResult, WeightResult, auto_select_strategy,  # noqa: E402
                     compute_weights, rollout_fused, rollout_split, weighted_update)
from .feedback import PidGains, PIDFeedback, PidState  # noqa: E402
from .plant import Plant, SimulatedSystem, TrajectoryLog  # noqa: E402
from .sampling import GaussianSampler, GaussianSamplerConfig, NoiseBatch  # noqa: E402

__version__ = "0.1.0"
