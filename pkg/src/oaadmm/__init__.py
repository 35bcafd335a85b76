"""Online adaptive ADMM for decentralized MPC conflict resolution."""

__version__ = "0.1.0"
