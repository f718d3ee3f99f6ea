"""Multi-time-scale stochastic approximation with Markovian samples.

Solvers for coupled systems of N fixed-point equations: the accelerated
A-MSA iteration and the standard MSA baseline, plus exact diagnostics,
benchmark generators and an experiment harness.
"""

from .core import (AffineSystem, FunctionSystem, LevelVector, OperatorSystem, ParameterStack,
                   check_affine_bound, evaluate_mean_operator, evaluate_operator, load_system,
                   save_system, stack_axpy, stack_norms, system_from_dict)
from .samplers import (ErgodicityCertificate, FixedKernel, MixtureKernel, draw_next,
                       fit_ergodicity, mixing_time, stationary_distribution, tv_distance,
                       validate_kernel_lipschitz)
from .schedules import (StepSchedule, amsa_stepsizes, check_amsa_conditions, msa_lyapunov_weights,
                        optimal_msa_exponents, predict_amsa_rate, predict_msa_rate)
from .solvers import Trajectory, amsa_step, msa_step, run, run_batch

__version__ = "0.1.0"
