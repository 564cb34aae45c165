"""Black-start restoration engine.

Library surface: a network data model with crank-path energization, a
linear-circuit load model fitted from measurement streams, classical and
governor power flow, an interior-point solver for the crank-step and
synchronization optimizations, and an operator-facing HTTP service.
"""

from .netmodel import (
    Bus, Branch, Generator, LoadRecord, Network, CrankStep, CrankPath,
    DispatchTarget, CaseError, OrderingError,
    load_case, serialize_case, load_matrix_case, load_crankpath,
    serialize_crankpath, apply_energization, assemble_ybus, islands,
    content_hash,
)
from .bigload import (
    BigLoad, MeasurementSample, MeasurementWindow, FitError, FitResult,
    big_current, big_power, fit_big, aggregate, pq_to_big, synth_stream,
)
from .powerflow import (
    PFSolution, SmoothLimitParams, PowerFlowError,
    droop_response, solve_pf, solve_gpf, kcl_residual, branch_losses,
)
from .pdip import (
    OptProblem, OptSolution, SolverConfig, PDIPState, IterationRecord,
    QuadraticProblemBuilder, SingularKKTError,
    build_kkt, diode_step_lengths, solve, check_kkt,
)

__version__ = "0.1.0"
