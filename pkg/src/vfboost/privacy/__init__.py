"""Privacy calibration, composition accounting and the split-score utility bound."""

from vfboost.privacy.accountant import (PrivacyConfig, QueryBudget, Schedule,
                                        advanced_epsilon, budget_schedule,
                                        compose, compose_parallel, split_budget)
from vfboost.privacy.calibration import (CalibratedParams, DeltaEstimate,
                                         ap_sensitivity_budget, calibrate,
                                         calibrate_C, calibrate_ratio,
                                         calibrate_sigma2, circulant_logdet,
                                         cycle_covariance, det_ratio,
                                         mu_logistic, pp_abc, pp_delta,
                                         pp_delta_at_ratio, pp_k_eigs,
                                         pp_matrix, sensitivity_sum)
from vfboost.privacy.utility import utility_bound, utility_kappa
