"""Dual-stream visual RL with mask-supervised semantics, motion residuals and
selective replay, on a synthetic top-down driving world."""

__version__ = "0.1.0"
