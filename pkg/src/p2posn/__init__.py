"""Decentralized social-network framework running inside a deterministic
network simulator."""

__version__ = "0.1.0"
