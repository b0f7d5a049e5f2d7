"""Deterministic desk-scale simulator for distributed GNN training strategies."""

from .config import RunConfig, parse_config
from .engine import (CostModel, EpochMetrics, TraceTable, alpha_ratio,
                     build_world, delete_column_and_redistribute,
                     find_fewest_column, merge_controller, migration_target,
                     run_locality_optimized, run_micrograph, run_model_centric,
                     run_naive_feature_centric, run_strategy,
                     simulated_step_time)
from .featstore import (CommLedger, FeatureStore, FetchStats, PregatherPlan,
                        execute_pregather, init_features, plan_pregather)
from .graph import (Graph, PartitionMap, SbmSpec, add_self_loops, edge_cut,
                    generate_sbm, load_csr, load_edge_list, load_partition,
                    partition_greedy_locality, partition_hash, save_csr,
                    save_partition, serialize_edge_list)
from .model import (GradAccumulator, Gradients, LabelOracle, ModelState,
                    accumulate, forward, init_model, loss_and_backward,
                    sync_and_update)
from .metrics import (LocalityRow, compare_strategies, locality_report,
                      r_micro, r_sub)
from .sampler import (Micrograph, MiniBatchPlan, SamplerConfig, Subgraph,
                      build_subgraph, load_imbalance, redistribute_roots,
                      sample_micrograph, stream_key)

__version__ = "0.1.0"
