"""Group personalized federated learning simulator.

Global FL training, per-group FL fine-tuning and per-client personalization
over flat numpy parameter vectors, plus closed-form posteriors of the
matching Gaussian hierarchy and a Monte-Carlo oracle to check them.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ClientRecord,
    ConfigError,
    ContractError,
    DivergenceError,
    ModelDelta,
    PersistenceError,
    RunConfig,
    VerificationError,
    load_checkpoint,
    save_checkpoint,
    seeded_rng,
)
from .engine import (  # noqa: E402
    METHODS,
    Population,
    cost_accounting,
    run_global_training,
    run_group_finetuning,
    run_personalization,
    sample_cohort,
)
from .models import GaussianMeanModel, TinyBigramLM, grad_check, perplexity  # noqa: E402
from .optim import FedAdamState, SgdConfig, aggregate_deltas, fedadam_step, local_sgd  # noqa: E402

__all__ = [
    "ClientRecord", "ConfigError", "ContractError", "DivergenceError", "ModelDelta",
    "PersistenceError", "RunConfig", "VerificationError", "load_checkpoint", "save_checkpoint",
    "seeded_rng", "METHODS", "Population", "cost_accounting", "run_global_training",
    "run_group_finetuning", "run_personalization", "sample_cohort", "GaussianMeanModel",
    "TinyBigramLM", "grad_check", "perplexity", "FedAdamState", "SgdConfig", "aggregate_deltas",
    "fedadam_step", "local_sgd",
]
