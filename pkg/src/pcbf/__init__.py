"""Probabilistic control barrier function safety filters.

Sub-modules: ``core`` (dynamics, barriers), ``moments`` (disturbance
models, datasets, quantiles), ``conditions`` (filter constraints),
``solver`` (filter backends), ``cert`` (horizon and sample-size
calculus), ``sim`` (rollouts and experiments) and ``cli``.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
