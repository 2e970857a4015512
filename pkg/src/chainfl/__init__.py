"""Blockchain-verified federated learning simulator.

Clients commit signed model hashes to a proof-of-work ledger; the server
screens submissions against that history (duplicate uploads, post-commit
tampering, forged identities, replays) before a FedAvg-style aggregation, and
a reputation ledger steers which clients are sampled next round.
"""

from .config import ExperimentConfig, load_config, load_preset
from .orchestrator import run_experiment, run_round

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "load_config", "load_preset", "run_experiment", "run_round"]
