"""Numerical laboratory for the m-equivariant self-dual gauged Schrodinger flow.

Modules: grid (discretization and norms), gauge (potentials and conserved
quantities), profiles (vortex and blow-up profile constructions), linops
(linearized operators and spectral diagnostics), hardy (inequality checks),
evolution (time integration), modulation (decomposition and shooting),
cli (command-line driver).
"""

from .grid import (EquivariantField, RadialGrid, adapted_norm, inner_real,
                   integrate, make_grid, radial_derivative, seminorm_weighted,
                   sobolev_norm)
from .gauge import (GaugeFields, charge, compute_gauge, d_plus, energy,
                    pde_rhs, virial_first, virial_second)
from .profiles import (ProfileTables, build_profile_tables, modified_profile,
                       profile_error, pseudoconformal_s, solve_q_eta,
                       solve_rho, static_q)
from .linops import (LinOpContext, OrthoSet, adapted_derivatives,
                     build_context, build_ortho_set, coercivity_estimate,
                     conjugation_residual, nullspace_check, repulsivity_check,
                     transversality_matrix)
from .evolution import (SolverConfig, TrajectoryRecord, evolve,
                        evolve_renormalized, step, virial_check)
from .modulation import (DecompositionResult, Decomposer, ModulationState,
                         TrappedConfig, integrate_formal_ode, make_decomposer,
                         shoot_eta, track)

__version__ = "0.1.0"
