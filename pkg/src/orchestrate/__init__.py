"""Desk-scale hyperparameter tuning orchestration.

Logical clusters, a bin-packing run scheduler, embedded search strategies,
and supervised local processes standing in for containers.
"""

__version__ = "0.1.0"
