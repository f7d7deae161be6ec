"""PDEs with integral terms: conversion to partial integral equations and
Lyapunov stability certificates.

Modules
-------
polyalg      exact and floating polynomial matrices in ``s`` and ``(s, th)``
pi_ops       3-PI operators: algebra, adjoints, text form
pde_model    PDE systems and the PDESPEC file format
conversion   admissibility test and the PDE to PIE map
lpi          Lyapunov inequality as an SDP, solving and certificate checking
oracle       independent numerical discretizations
observer     generator for the reaction-diffusion observer model
cli          command-line interface
"""

from .conversion import PieSystem, compute_BT, convert
from .pde_model import PdeSystem, StatePartition, bind_params, load_pde, parse_pde
from .pi_ops import PiOperator, adjoint, apply_poly, compose

__version__ = "0.1.0"

__all__ = [
    "PdeSystem",
    "PieSystem",
    "PiOperator",
    "StatePartition",
    "adjoint",
    "apply_poly",
    "bind_params",
    "compose",
    "compute_BT",
    "convert",
    "load_pde",
    "parse_pde",
]
