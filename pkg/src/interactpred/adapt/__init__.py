"""Downstream adaptation on a frozen encoder: behavior cloning and referring-expression grounding."""
from .env import ProprioState, PusherEnv, PusherEnvState, rollout, scripted_expert
from .policy import (AGGREGATION_MODES, Demos, FeaturePolicy, FrozenFeatures, PolicyHead,
                     RandomPolicy, collect_demos, evaluate_policy, load_demos,
                     proprio_map_aggregate, save_demos, train_bc_policy)
from .reg import (GroundingHead, RegSample, adapt_reg_head, average_precision, evaluate_reg,
                  generate_reg_dataset, load_reg_dataset, save_reg_dataset)
