"""difflab: linear-SDE diffusion models with exact covariance, scores and samplers."""
from .errors import ConfigError, ContractError, DiffLabError, DomainError, NumericalError, ScheduleError
from .process import (
    AxisScheduleSet, ConstantMatrix, CosineSchedule, DiagonalSchedule, ExponentialRateSchedule,
    ProcessSpec, RotatingDiagonal, RotationPlusDecay, TabulatedSchedule, TimeGrid, ddim_spec,
    exponential_schedule, paddim_axes_from_data, paddim_spec, plain_vanilla_spec, process_from_dict,
)
from .evolution import build_evolution, kernel, matrix_exponential
from .covariance import (
    fokker_planck_residual, make_tables, sigma_by_ode, sigma_by_quadrature, sigma_ddim_closed_form,
    v_factor,
)
from .score import ScoreModel, epsilon_from_score, exact_score, mixture_score, score_matching_cost
from .samplers import (
    ReverseConfig, ddim_step, ei_step, exact_backward_path, forward_em, paddim_step,
    probability_flow_integrate, reverse_sde_sample,
)
from .equilibrium import diagnose, probability_current, rotating_basis_perturbation, solve_Q, stationary_sigma

__version__ = "0.1.0"
