"""Two-stage difference-in-differences evaluation of a ward-level pay-for-performance policy."""

from .core import (OUTCOMES, PATIENT_COVARIATES, AdmissionDataset, AdmissionRecord, Ownership,
                   StudyConfig, SummaryTable, load_admissions, summarize,
                   validate_did_assumptions, write_admissions)
from .did import (DidCoefficients, DidDesign, InteractionScheme, MultivariateMixedFit,
                  build_design, extract_did_coefficients, fit_multivariate_mixed)
from .effects import DidSummary, MarginalEffectsTable, did_reduction, marginal_effects, savings_count
from .inference import (BootstrapResult, JointTestResult, cluster_bootstrap, coefficient_table,
                        wilks_parallel_trend_test)
from .riskadjust import (LogisticMixedFit, LogisticMixedSpec, PanelDataset, collapse_to_panel,
                         fit_logistic_mixed, predict_probabilities, read_panel, risk_adjust,
                         write_panel)
from .sim import (GeneratorTruth, PanelOutcomeTruth, PatientOutcomeTruth, RecoveryReport,
                  four_means_did, generate_panel, generate_synthetic, recovery_study)

__version__ = "0.1.0"
