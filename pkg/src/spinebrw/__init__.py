"""Rare-event first-passage simulation for supercritical branching random
walks: a spine-decomposition importance sampler for the fast lower tail, a
brute-force oracle, and the slow-passage rate optimizer."""

from .brw import (FptResult, PmfEstimate, TreeHistory, brute_force_fpt,
                  fpt_pmf, min_distance_to_target, simulate_tree)
from .estimator import (AlgoParams, BatchStats, CdfEstimate,
                        DecorationResult, ReplicateOutcome, SkeletonFlags,
                        TruncationError, check_skeleton_events, compute_Z,
                        estimate_cdf, plan_sample_size, run_batch,
                        run_decorations_and_check_E8, run_replicate)
from .model import (BrwModel, IsotropicGaussian, NumericFault, OffspringLaw,
                    PluggableJump, extinction_prob, gamma_rate,
                    mean_offspring, reference_model, sample_jump,
                    sample_offspring)
from .ratefn import (CramerProfile, InfeasibleError, RateDomainError,
                     derive_profile, legendre_rate, log_mgf_1d, rate_1d,
                     solve_c1, tilt_for_mean)
from .spine import (BoneSet, SpinePath, sample_bone_set,
                    sample_size_biased_count, sample_spine_path,
                    sample_tilted_jump)
from .upperdev import (UpperDevProblem, UpperDevSolution, gantert_objective,
                       isotropic_objective, solve_T)

__all__ = [name for name in dir() if not name.startswith("_")]
