"""Cooperative table-carrying at desk scale: reward stack, formation
geometry, teammate-token policy, masked dual-discriminator style rewards,
PPO trainer, and evaluation metrics."""

__version__ = "0.1.0"
