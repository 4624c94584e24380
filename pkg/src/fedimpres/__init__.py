"""Desk-scale federated-learning lab with impression synthesis.

Subpackages: nn (differentiable core), data (FIDB + partitioning),
impression (ADMM synthesis), engine (round orchestration), metrics,
config/cli (entry points).
"""

__version__ = "0.1.0"
