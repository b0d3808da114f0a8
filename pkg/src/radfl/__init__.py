"""Route-and-aggregate decentralized federated learning over lossy multi-hop networks."""
from .analysis import BoundInputs, bound_report, coefficient_distribution, lemma3_bounds, zeta_constants
from .errors import (ConfigError, ConnectivityFailure, DomainError, InvalidDensity, NonFiniteGradient,
                     RadflError, SizeLimit, SizeWarning, Unreachable, UnsupportedTask)
from .experiment import run_experiment, sweep_aggregator
from .netmodel import ChannelParams, NetworkGraph, build_random_geometric, reference_topology
from .protocol import ProtocolConfig, run_protocol
from .routing import RoutePlan, assign_slots, brute_force_routes, constrained_admission, min_per_routes, routing_objective

__version__ = "0.1.0"

__all__ = [
    "BoundInputs", "ChannelParams", "ConfigError", "ConnectivityFailure", "DomainError", "InvalidDensity",
    "NetworkGraph", "NonFiniteGradient", "ProtocolConfig", "RadflError", "RoutePlan", "SizeLimit", "SizeWarning",
    "Unreachable", "UnsupportedTask", "assign_slots", "bound_report", "brute_force_routes",
    "build_random_geometric", "coefficient_distribution", "constrained_admission", "lemma3_bounds",
    "min_per_routes", "reference_topology", "routing_objective", "run_experiment", "run_protocol",
    "sweep_aggregator", "zeta_constants",
]
