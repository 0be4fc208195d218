"""Space-time Galerkin-collocation solver for 2D incompressible Navier-Stokes."""
from .assembly import Assembler, BlockSystem, assemble, condense_dirichlet, strong_dirichlet_constraints
from .bench import (ManufacturedSolution, RunConfig, drag_lift, error_norms, run_channel_compare,
                    run_convergence_study, run_dfg)
from .fem import TaylorHoodPair
from .forms import IntervalState, NavierStokesForms, NitscheParams, ProblemData
from .linalg import SolverConfig, block_schur_preconditioner, condition_number, gmres
from .mesh import ChannelGeometry, Marker, Mesh, generate_channel_cylinder, generate_unit_square
from .stepper import (NavierStokesSystem, NewtonConfig, TimeMarchConfig, march, newton_solve,
                      step_cgp1, step_gcc13)
from .time_kernel import coupling_table, eval_basis, hermite_quadrature_k3

__all__ = [name for name in dir() if not name.startswith("_")]
