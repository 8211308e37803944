"""Controls for 1-D boundary-degenerate parabolic equations on moving intervals.

The package synthesizes distributed/bilinear controls for equations of the
form ``u_t - (a(x) u_x)_x + F(x, t, u) = h 1_w u`` posed on ``0 < x < ell(t)``
with ``a(0) = 0``.  The moving interval is mapped onto the unit cylinder, the
linearized problem is solved by a weighted dual least-squares construction,
and the semilinear problem by an outer source-term fixed point around it.
"""

from degctrl.model import (
    ControlGeometry,
    DegenerateCoefficient,
    DomainMotion,
    Nonlinearity,
    power_law_metadata,
    validate_problem,
)
from degctrl.transform import build_transform, pull_back_initial, push_forward_state
from degctrl.disc import Grid, StateField
from degctrl.carleman import build_psi, build_weights, select_lambda, WeightSystem
from degctrl.control_linear import ControlProblemLinear, solve_null_control
from degctrl.control_nonlinear import FixedPointConfig, solve_trajectory_tracking

__version__ = "0.1.0"

__all__ = [
    "ControlGeometry",
    "ControlProblemLinear",
    "DegenerateCoefficient",
    "DomainMotion",
    "FixedPointConfig",
    "Grid",
    "Nonlinearity",
    "StateField",
    "WeightSystem",
    "build_psi",
    "build_transform",
    "build_weights",
    "power_law_metadata",
    "pull_back_initial",
    "push_forward_state",
    "select_lambda",
    "solve_null_control",
    "solve_trajectory_tracking",
    "validate_problem",
    "__version__",
]
