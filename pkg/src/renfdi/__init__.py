"""Fault detection and isolation with acyclic robust recurrent equilibrium
network filters, trained on a simulated roll-plane vehicle."""

__version__ = "0.1.0"
