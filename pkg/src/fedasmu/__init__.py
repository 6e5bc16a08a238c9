"""Desk-scale deterministic simulator for staleness-aware asynchronous FL.

Core pieces: dense parameter vectors (`params`), synthetic tasks with
analytic gradients (`tasks`), the staleness-aware server (`server`), the
adaptive device runtime (`device`), the request-slot selector (`selector`),
the virtual-time event engine (`simulate`), strategy dispatch
(`strategies`), and the config/experiment harness (`config`, `harness`).
"""

from ._kernels import backend_name
from .config import ExperimentConfig, dump_config, load_config
from .harness import run_experiment, summarize, time_to_target
from .simulate import MetricsLog, RunConfig, run_simulation
from .tasks import Dataset, ModelSpec

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "ExperimentConfig", "dump_config", "load_config",
    "run_experiment", "summarize", "time_to_target",
    "MetricsLog", "RunConfig", "run_simulation",
    "Dataset", "ModelSpec",
    "__version__",
]
