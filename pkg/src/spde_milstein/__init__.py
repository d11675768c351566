"""Milstein-Galerkin finite element schemes for semilinear stochastic heat equations."""
from .fem import FemOperators, Mesh1D, assemble
from .noise import CovarianceSpectrum, TimeGrid, WienerPath, power_law_spectrum, sample_path
from .problem import ProblemSpec, build_problem, default_problem
from .scheme import Discretization, GridProcess, SchemeConfig, Variant, run
from .spectral import EigenBasis, laplacian_eigenpairs

__version__ = "0.1.0"

__all__ = [
    "FemOperators", "Mesh1D", "assemble", "CovarianceSpectrum", "TimeGrid", "WienerPath",
    "power_law_spectrum", "sample_path", "ProblemSpec", "build_problem", "default_problem",
    "Discretization", "GridProcess", "SchemeConfig", "Variant", "run", "EigenBasis",
    "laplacian_eigenpairs",
]
