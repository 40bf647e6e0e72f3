# Copyright (c) the ratechange authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.

# flake8: noqa
from .records import FilterRecord
from .particles import (
    BranchingConfig, Ensemble, bayes_factor, evolve, init_ensemble, log_bayes_factor,
    log_unnormalized_total, normalized_estimate, resample_residual, run_particle_filter, unnormalized_estimate)
from .direct import (
    Comparison, DirectConfig, FilterVector, compare_models, drift_matrix, evolve_between_jumps, fkk_jump_update,
    jump_update, run_direct_filter, trotter_factor)
