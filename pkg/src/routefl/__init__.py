"""Federated learning simulator with per-instance routing between a shared global
encoder and a per-round locally finetuned copy."""

from .autodiff import Parameter, Tape, Tensor, backward, sgd_step
from .client import ClientDataset, ClientUpdate, TrainHyper, client_pre_inference, client_train, infer
from .data import ClassifyTaskSpec, SequenceTaskSpec, generate_federation, true_client_divergence
from .model import DynamicPersonalizedModel, GlobalModel, LocalParams, ModelSpec, RoutingPolicy
from .server import FederationConfig, aggregate_fedavg, run_training

__version__ = "0.1.0"
