"""Core functionality of the graph U-net mesh simulator."""

from .config import Config, load_model_config, load_run_config
from .meshgraph import HeteroGraph, MeshState, Trajectory, build_hetero_graph, load_trajectory, save_trajectory
from .pooling import PoolingPlan, build_pooling_plan, dfs_cluster, receptive_field
from .sgunet import SgunetModel, count_parameters, init_params
from .transfer import Checkpoint, frobenius_penalty, transplant
from .trainer import position_rmse, rollout, train

__all__ = [
    'Config',
    'load_model_config',
    'load_run_config',
    'HeteroGraph',
    'MeshState',
    'Trajectory',
    'build_hetero_graph',
    'load_trajectory',
    'save_trajectory',
    'PoolingPlan',
    'build_pooling_plan',
    'dfs_cluster',
    'receptive_field',
    'SgunetModel',
    'count_parameters',
    'init_params',
    'Checkpoint',
    'frobenius_penalty',
    'transplant',
    'position_rmse',
    'rollout',
    'train',
]

# Version information
__version__ = '0.1.0'
