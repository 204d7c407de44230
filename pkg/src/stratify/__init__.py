"""Label-stratified federated learning simulator.

Clients keep their samples; the server drives training through a shuffled
schedule of opaque label placeholders and picks, for every scheduled
placeholder, a client that holds it. Baselines (FedAvg, FedProx, SCAFFOLD,
sequential FL) run on the same models, partitions and seeds.
"""

from .baselines import BaselineConfig, BaselineRunner, fedavg_round, fedprox_local, scaffold_round, sfl_pass
from .data import ClientShard, Dataset, PartitionSpec, load_digits_dataset, make_synthetic, partition
from .estimators import FederatedBaselineClassifier, StratifyClassifier
from .exceptions import ConfigurationError, StratifyError
from .experiment import CommCostModel, ExperimentConfig, MetricsRecord, comm_cost, emit_csv, run_experiment
from .model import ModelParams, build_model
from .orchestrator import Server, build_federation, evaluate
from .schedule import FrequencyPlan, Schedule, build_sls
from .selection import ClientPool, SelectionPolicy, select_batch, select_single_sample

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig", "BaselineRunner", "ClientPool", "ClientShard", "CommCostModel", "ConfigurationError",
    "Dataset", "ExperimentConfig", "FederatedBaselineClassifier", "FrequencyPlan", "MetricsRecord",
    "ModelParams", "PartitionSpec", "Schedule", "SelectionPolicy", "Server", "StratifyClassifier",
    "StratifyError", "build_federation", "build_model", "build_sls", "comm_cost", "emit_csv", "evaluate",
    "fedavg_round", "fedprox_local", "load_digits_dataset", "make_synthetic", "partition", "run_experiment",
    "scaffold_round", "select_batch", "select_single_sample", "sfl_pass",
]
