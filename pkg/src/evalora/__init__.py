"""Data-driven initialisation of low-rank adapters from activation statistics."""
from .adapter import InitMode, LoraAdapter, adapter_forward, init_adapters, merge, merge_network
from .alloc import RankAllocation, allocation_delta, explained_variance_ratio, redistribute_ranks
from .linalg import SvdResult, component_cosine_similarity, random_orthogonal, svd_randomized, svd_truncated
from .net import AttentionBlock, Batch, Dense, LinearLayer, TaskConfig, ToyNetwork, backward, forward_with_taps, make_teacher_student
from .svdstream import SvdState, StreamConfig, check_convergence, run_initialization_pass, svd_update
from .train import RunMetrics, TrainConfig, compare_inits, finetune, gradient_check

__version__ = "0.1.0"
