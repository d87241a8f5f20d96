"""
Mean Field Bismut

特異相互作用を持つ McKean-Vlasov SDE の粒子シミュレーションと、
内在微分（初期分布の方向微分）の Bismut 型推定を行うツール
"""

__version__ = "0.1.0"

from .bismut import BismutEstimate, intrinsic_derivative
from .config import RunConfig, load_run_config
from .ensemble import TimeGrid, make_grid
from .experiment import ExperimentSetup, build_setup
from .simulator import MeasureFlow, simulate_decoupled, simulate_mv

__all__ = [
    "BismutEstimate",
    "ExperimentSetup",
    "MeasureFlow",
    "RunConfig",
    "TimeGrid",
    "build_setup",
    "intrinsic_derivative",
    "load_run_config",
    "make_grid",
    "simulate_decoupled",
    "simulate_mv",
    "__version__",
]
