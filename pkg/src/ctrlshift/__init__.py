"""Clustered transfer residual learning (CTRL) for many unevenly sized data sources."""

from .baselines import JttConfig, rwg_weights, train_jtt, train_rwg
from .cluster import (ClusterReport, ClusterSearch, StabilityWeights, SubsetInstance,
                      one_se_rule, select_cluster, solve_subset, stability_weights,
                      subset_objective)
from .dataset import (Dataset, SplitPair, SynthConfig, generate_synthetic, load_csv,
                      small_sources, stratified_split, write_csv)
from .evaluation import (EvalReport, PredictionMatrix, average_ranks, mse, prediction_matrix,
                         rwa, rwa_sweep, small_mse)
from .learners import LeafPartition, LearnerSpec, fit, fit_fixed_partition_mean, predict
from .pipeline import Predictor, predict_at, train_ctrl, train_global, train_local, train_trl
from .shift_theory import (ExcessRiskEstimate, ShiftSimConfig, cluster_beta,
                           simulate_excess_risk, theoretical_excess_mean)

__version__ = "0.1.0"
