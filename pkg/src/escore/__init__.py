"""Energy-based diffusion policy toolkit.

A scalar energy network whose action-gradient is the denoising field,
trained by denoising score matching, sampled through the probability-flow
ODE, and mined for reward signals that feed a small soft actor-critic.
Everything is validated against analytic ground-truth experts.
"""

from escore.numerics import Rng, frobenius_norm, sym_defect

__all__ = ["Rng", "frobenius_norm", "sym_defect"]
__version__ = "0.1.0"
