"""difftse: conditional score-based diffusion for target speech extraction
at desk scale, with analytic verification oracles and a synthetic corpus."""

__version__ = "0.1.0"

from .sde import SdeParams, T_EPS
from .models import ModelConfig, TseNet, DiffTse, DiffTseMt, OracleGaussianScore
from .training import TrainConfig
from .sampling import SamplerConfig
from .metrics import StftConfig
from .corpus import CorpusConfig

__all__ = [
    "SdeParams", "T_EPS", "ModelConfig", "TseNet", "DiffTse", "DiffTseMt",
    "OracleGaussianScore", "TrainConfig", "SamplerConfig", "StftConfig",
    "CorpusConfig", "__version__",
]
