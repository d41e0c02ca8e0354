"""Safe offline RL with a learned feasibility value on a toy reach-avoid task.

Submodules: ``env`` (simulator and oracle), ``dataset``, ``nn`` (MLPs,
reverse mode, Adam, checkpoints), ``values`` (feasible / reward / cost
critics), ``diffusion`` (weighted diffusion policy and weights),
``pipeline`` (training stages, action selection, evaluation), ``cli``.
"""

from .config import RunConfig
from .env import EnvConfig

__all__ = ["EnvConfig", "RunConfig"]
__version__ = "0.1.0"
