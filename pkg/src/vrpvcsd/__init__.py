"""Multi-vehicle routing with a variable customer basis and stochastic demands.

Simulation environment, decentralized Q-learning, benchmark and rollout
policies, a deterministic MILP export, and evaluation tooling.
"""
__version__ = "0.1.0"
