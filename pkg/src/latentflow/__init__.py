"""Role-structured latent action policies steering a conditional
flow-matching scene generator, trained by prior-guided variational
alignment and group-relative RL with terminal programmatic rewards."""

__version__ = "0.1.0"
