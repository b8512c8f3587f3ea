"""Queue-aware targeting: simulation, stationary analytics, CADE fitting, off-policy evaluation and policy learning."""

from .chain import KernelFactory, StationaryDist, TransitionKernel, arrival_conditioned, build_kernel, stationary
from .policy import ConstantPolicy, DirectRule, LoggingPolicy, ThresholdRule, TrueCade
from .sim import Horizon, Trajectory, simulate
from .systems import Event, Kind, SpecError, SystemSpec, load_spec, mnm1_example, parallel_example

__version__ = "0.1.0"

__all__ = [
    "ConstantPolicy", "DirectRule", "Event", "Horizon", "KernelFactory", "Kind", "LoggingPolicy", "SpecError",
    "StationaryDist", "SystemSpec", "ThresholdRule", "Trajectory", "TransitionKernel", "TrueCade",
    "arrival_conditioned", "build_kernel", "load_spec", "mnm1_example", "parallel_example", "simulate", "stationary",
]
