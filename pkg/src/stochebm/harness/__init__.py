"""Files, configuration, synthetic data and the command-line pipeline."""
from .config import RunConfig, load_config
from .pipeline import CvReport, load_data
from .synthetic import SyntheticTruth, generate_ensemble, synthetic_forcing

__all__ = ["RunConfig", "load_config", "CvReport", "load_data", "SyntheticTruth",
           "generate_ensemble", "synthetic_forcing"]
