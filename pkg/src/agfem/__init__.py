"""Aggregated unfitted finite elements on Cartesian background grids.

Level-set cell classification, serial and distributed cell aggregation,
constrained aggregated FE spaces, Nitsche-Poisson assembly, and a
Jacobi-preconditioned CG solver, all reproducible on a deterministic
virtual-process runtime.
"""

from .aggregation import (AggregateSet, AggregationStalledError, RootMap,
                          aggregate_serial, aggregates)
from .assembly import (DistributedSystem, ElementContribution, assemble_distributed,
                       assemble_serial, element_poisson_nitsche, nitsche_tau_agg,
                       nitsche_tau_std, poisson_elements)
from .distagg import (DistRootMap, aggregate_parallel, build_direct_plan,
                      build_inverse_plan, import_root_data)
from .distspace import (DistNumbering, build_constraints_distributed,
                        number_dofs_distributed)
from .fespace import (AgConstraints, DofClassification, StdSpace,
                      build_constraints_serial, build_std_space, classify_dofs,
                      prolongate)
from .geometry import (CellClassification, CutQuadrature, classify_cells,
                       cut_quadrature, face_is_active)
from .grid import BackgroundGrid, build_grid, face_neighbors, unit_box_grid
from .levelset import HalfPlane, LevelSet, Popcorn, Sphere
from .partition import (Partition, SubdomainMesh, build_subdomain_meshes,
                        partition_weighted_sfc)
from .runtime import VirtualRuntime
from .solve import (ErrorNorms, SolveReport, condition_estimate, error_norms,
                    pcg_jacobi)

__version__ = "0.1.0"

__all__ = [
    "AgConstraints", "AggregateSet", "AggregationStalledError",
    "BackgroundGrid", "CellClassification", "CutQuadrature", "DistNumbering",
    "DistRootMap", "DistributedSystem", "DofClassification",
    "ElementContribution", "ErrorNorms", "HalfPlane", "LevelSet", "Partition",
    "Popcorn", "RootMap", "SolveReport", "Sphere", "StdSpace",
    "SubdomainMesh", "VirtualRuntime", "aggregate_parallel",
    "aggregate_serial", "aggregates", "assemble_distributed",
    "assemble_serial", "build_constraints_distributed",
    "build_constraints_serial", "build_direct_plan", "build_grid",
    "build_inverse_plan", "build_std_space", "build_subdomain_meshes",
    "classify_cells", "classify_dofs", "condition_estimate", "cut_quadrature",
    "element_poisson_nitsche", "error_norms", "face_is_active",
    "face_neighbors", "import_root_data", "nitsche_tau_agg", "nitsche_tau_std",
    "number_dofs_distributed", "partition_weighted_sfc", "pcg_jacobi",
    "poisson_elements", "prolongate", "unit_box_grid",
]
