"""Privacy accountants (order-2 RDP and Fisher information leakage) and MSE bounds."""

from reconbound.accounting.bounds import (
    PERFECT_PRIVACY,
    BoundInputs,
    dfil_bound,
    mse_lower_bound_fil,
    mse_lower_bound_rdp,
)
from reconbound.accounting.fil import (
    AccountingParams,
    FilAccountant,
    FilAccumulator,
    FilEstimate,
    fil_accountant_run,
    output_perturbation_fim,
    output_perturbation_fim_dense,
    output_perturbation_jacobian,
    per_step_fil_spectral,
    per_step_fim_trace,
    step_kappa,
)
from reconbound.accounting.oracles import hcrb_check, mc_fim_1d, tightness_bound
from reconbound.accounting.rdp import (
    delta_budget,
    kappa,
    mia_advantage_bound,
    rdp_dpsgd,
    rdp_output_perturbation,
    rdp_subsampled_gaussian_alpha2,
    step_epsilon_dp,
)

__all__ = [
    "PERFECT_PRIVACY", "BoundInputs", "dfil_bound", "mse_lower_bound_fil", "mse_lower_bound_rdp",
    "AccountingParams", "FilAccountant", "FilAccumulator", "FilEstimate", "fil_accountant_run",
    "output_perturbation_fim", "output_perturbation_fim_dense", "output_perturbation_jacobian",
    "per_step_fil_spectral", "per_step_fim_trace", "step_kappa",
    "hcrb_check", "mc_fim_1d", "tightness_bound",
    "delta_budget", "kappa", "mia_advantage_bound", "rdp_dpsgd", "rdp_output_perturbation",
    "rdp_subsampled_gaussian_alpha2", "step_epsilon_dp",
]
