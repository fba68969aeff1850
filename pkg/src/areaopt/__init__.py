"""Alternating reward-entropy ascent for interactive human-machine processes.

A library and CLI for estimating interactive human behavior by constrained
maximum causal entropy, optimizing entropy-regularized machine policies
against the estimate, and alternating the two to a consistent pair, with a
synthetic accumulator human and a tabular Q-learning baseline for evaluation.
"""

__version__ = "0.1.0"

from .estimation import (DualVariables, EstimationOptions, backward_dense,
                         backward_structured, deviation_survival,
                         dual_gradient, dual_objective, estimate_human,
                         feature_moments, feature_moments_dense, solve_dual)
from .features import (CompositeFeature, ConstraintSet, DecomposableFeature,
                       DenseFeature, PathFeature, PrefixFeature,
                       RewardFunction, build_constraint_set, eval_feature,
                       path_with_prefixes, reward_eval)
from .lca import (LcaParams, SampleBatch, empirical_moments, lca_choose,
                  lca_step, sample_interactions)
from .loop import (AreaOptions, AreaState, AreaTrace, MomentSource, area_step,
                   pair_metrics, regularized_reward, run_area, step_constraint)
from .machine import (decomposable_policy, extract_policy, log_partition,
                      machine_objective)
from .machine import backward_dense as machine_backward_dense
from .machine import backward_structured as machine_backward_structured
from .pathtree import PathTree, union_tree
from .process import (HUMAN, MACHINE, CapExceededError, DenseCausalTable,
                      JointDistribution, ProcessSpec, Trajectory,
                      causal_entropy, expect_function, factorize_joint,
                      validate_causal)
from .qlearn import QlParams, QTable, ql_select, ql_update, run_qlearning
from .structured import StructuredHumanModel, StructuredMachinePolicy
