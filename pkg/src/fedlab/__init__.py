"""Desk-scale federated learning under label skew: FedAvg, FedProx and
encoder concatenation over label-distribution clusters."""

__version__ = "0.1.0"
