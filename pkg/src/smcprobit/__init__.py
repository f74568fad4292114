"""Sequential Monte Carlo EM for multivariate probit regression.

Submodules
----------
probit
    Model containers, identification and likelihood helpers.
smc
    Particle sampler for orthant-truncated multivariate normals.
mcem
    Monte Carlo EM driver, M-step maximizers and standard errors.
oracle
    Independent reference samplers and orthant probabilities for testing.
dataio, scaling, cli
    Data ingestion, the step-count experiment and the command line.
"""
from .probit import BLOCK, SHARED, Parameters, ProbitDataset
from .smc import SMCConfig, sample_tmvn, sample_tmvn_batch
from .mcem import MaximizerConfig, MCEMConfig, run_mcem, standard_errors

__version__ = "0.1.0"

__all__ = [
    "BLOCK",
    "SHARED",
    "Parameters",
    "ProbitDataset",
    "SMCConfig",
    "sample_tmvn",
    "sample_tmvn_batch",
    "MaximizerConfig",
    "MCEMConfig",
    "run_mcem",
    "standard_errors",
]
