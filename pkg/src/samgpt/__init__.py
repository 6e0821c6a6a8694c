"""Multi-domain graph pre-training with structure tokens and dual-prompt few-shot adaptation."""
from .graphstore import GraphBundle, load_bundle, save_bundle, compute_stats, ego_network
from .pretrain import Checkpoint, PretrainConfig, pretrain_run, align_domains
from .adapt import AdaptConfig, PromptState, prompt_tune, embed_adapted, predict
from .taskbench import BenchmarkPlan, ResultTable, make_episodes, run_plan, ablation_matrix, sensitivity_sweep

__version__ = "0.1.0"
