# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
# flake8: noqa

"""Rate change of continuous time Markov chains: sampling, weighting and filtering."""

__version__ = "0.1.0a1"

from .errors import (
    RateChangeError, ModelError, DomainError, BudgetError, BoundViolation, DegenerateFilter, NumericalError,
    UsageError)
from .rng import RngStream
from .chains import ChainPath, RateMatrix, StateSpace, TargetRateFamily, ValidationReport, validate
from .sampling import (
    LogWeight, log_weight, incremental_log_weight, certified_bound, rejection_sample, segmented_rejection_sample,
    weighted_samples, weighted_expectation, simulate_reference_chain)
from .models import (
    CmomModel, CthmmModel, HiddenChain, SignalSimulator, cthmm_to_cmom, simulate_joint_reference,
    simulate_joint_target, joint_log_weight)
from .formats import load_model, read_path, write_path
