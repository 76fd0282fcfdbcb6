"""Finite-element homogenization of Steklov eigenproblems with sign-changing density.

Modules: ``coeff`` (coefficient expressions), ``geometry`` (meshes), ``fem``
(assembly and constraints), ``eigen`` (indefinite Steklov and Dirichlet
eigensolvers), ``homog`` (cell problems and effective data), ``spectra``
(epsilon-level and limit spectra, corrector expansions) and ``study`` (the
convergence harness behind the command line).
"""
from .coeff import CoefficientTensor, DensityField, Field, parse
from .geometry import CellGeometry, EpsilonLevel, Mesh
from .homog import HomogenizedData, homogenize
from .study import StudyConfig, load_config, run_study

__version__ = "0.1.0"

__all__ = [
    "CellGeometry", "CoefficientTensor", "DensityField", "EpsilonLevel", "Field", "HomogenizedData", "Mesh",
    "StudyConfig", "homogenize", "load_config", "parse", "run_study",
]
