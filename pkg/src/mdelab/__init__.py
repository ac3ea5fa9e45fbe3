"""mdelab: numerical laboratory for the Matrix Dyson Equation and correlated random matrices."""
from __future__ import annotations

__version__ = "0.1.0"

from .herm import IndexMetric, SuperOperator  # noqa: E402
from .self_energy import CovarianceKernel, KernelSelfEnergy, MeanField, VarianceProfile  # noqa: E402
from .solver import DataPair, MdeSolution, SolverConfig, solve_at  # noqa: E402
from .dos import DosCurve, dos_on_real_line, estimate_support  # noqa: E402
from .stability import compute_saturation, stability_diagnostics  # noqa: E402
from .rmt import EnsembleSpec, filter_spec, goe_spec, gue_spec, sample  # noqa: E402

__all__ = [
    "__version__", "IndexMetric", "SuperOperator", "CovarianceKernel", "KernelSelfEnergy", "MeanField",
    "VarianceProfile", "DataPair", "MdeSolution", "SolverConfig", "solve_at", "DosCurve",
    "dos_on_real_line", "estimate_support", "compute_saturation", "stability_diagnostics",
    "EnsembleSpec", "filter_spec", "goe_spec", "gue_spec", "sample",
]
