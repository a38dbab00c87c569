"""Flow-matching generation with layerwise timestep experts.

A desk-scale library: a small autodiff tensor core, the flow-matching
math, timestep-expert scheduling and routing, gated residual attention,
the full model with conditioning cache and checkpoints, synthetic
datasets, a training loop, evaluation metrics, and a CLI.
"""

__version__ = "0.1.0"
