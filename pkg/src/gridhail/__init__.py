"""gridhail: a grid-city ride-hailing marketplace engine.

A centralized state-value function is learned online from every dispatch
round, periodically re-ensembled with an offline-trained time-indexed value
network, and drives both order matching and idle-fleet repositioning inside
a deterministic simulator.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .domain import (ConfigError, DataError, EngineConfig, EngineError, GridMap, Order,
                     SpatioTemporalState, TrainingDivergence, discount_exponent, discount_factor,
                     load_engine_config, save_engine_config, substream, travel_time)
from .valuefn import (CerebellarEmbedding, NetworkSpec, TabularValue, TargetShadow, ValueNetwork,
                      distill, embed, ensemble_tabular, lipschitz_penalty, load_snapshot,
                      save_snapshot, value, value_gradient)
from .offline_ope import (OpeTrainer, TrajectoryDataset, TrajectoryRecord, extract_transitions,
                          load_trajectories, save_trajectories, slice_values, smdp_reward,
                          train_ope)
from .online_engine import (ChangepointSchedule, DispatchRoundOutcome, OnlineValue,
                            maybe_ensemble, online_update, segment_orders, td_errors)
from .dispatch import (DispatchProblem, MatchingSolution, baseline_match, build_problem,
                       greedy_match, solve_matching, utility)
from .reposition import (ExpertMatrix, expert_reposition, greedy_reposition,
                         reposition_distribution, sample_reposition)
from .simulator import (EpisodeResult, PerturbationSpec, PolicyBundle, ScenarioConfig,
                        SimulationMetrics, generate_synthetic, load_scenario, run_ablation_suite,
                        run_episode, run_perturbation_experiment, save_scenario)

__version__ = "0.1.0"
