"""PAC-Bayes certified controller synthesis for stochastic nonlinear systems."""
from __future__ import annotations

__version__ = "0.1.0"
