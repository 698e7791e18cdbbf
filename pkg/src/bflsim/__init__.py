"""Simulator for blockchain-backed federated learning with task offloading,
P2P consensus between edge servers and learned resource allocation."""

__version__ = "0.1.0"
