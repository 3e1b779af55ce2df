"""Meta-training with latent codes, optimization-based baselines and Adam."""
from .adam import AdamState, adam_init, adam_step, clip_global_norm
from .baselines import (METHODS, BaselineState, adapt_params, anil_train, inner_adam, inner_optimizer, inner_sgd,
                        maml_train, meta_gradient, method_names, multitask_train, optimization_train, per_task, reptile_train,
                        reptile_update, scratch_init, scratch_train)
from .config import MetaConfig, TrainingDivergence, stream
from .data import TaskData, as_task_data, stack_tasks
from .predict import Predictor, traj_error_tasks
from .trainer import TrainerState, adapt, init_state, latent_steps, mean_latent, meta_train, start_code, validate
