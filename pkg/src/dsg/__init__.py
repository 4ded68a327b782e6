"""Hierarchically constrained discrete diffusion over scene graphs."""

from .conditioning import (
    EmbeddingClient,
    ParticleSet,
    incremental_weight,
    resample,
    reward_embedding,
    reward_lexical,
    smc_sample,
)
from .data import SynthSpec, load_checkpoint, load_corpus, save_checkpoint, synth_generate, write_corpus
from .denoiser import (
    Checkpoint,
    Denoiser,
    DenoiserOutput,
    MessagePassingDenoiser,
    TabularBayesOracle,
    TrainConfig,
    class_weights,
    giou,
    gradient_check,
    loss,
    train,
)
from .forward import corrupt_step, marginal_distribution, sample_marginal
from .graph import (
    GraphBatch,
    SceneGraphState,
    ValidityReport,
    Vocabulary,
    pad_batch,
    serialize_graph,
    to_dot,
    unpad_batch,
    validate,
)
from .metrics import attach_tv, layout_f1, mmd, rare_k_tv, triplet_tv, win_rate
from .refine import (
    GibbsBlock,
    RareBlock,
    RefinementPlan,
    SoftMaskBlock,
    apply_plan,
    gibbs_refine,
    rare_refine,
    soft_mask_refine,
)
from .sampler import (
    categorical_posterior,
    complete,
    relation_posterior,
    reverse_step,
    sample,
    sample_batch,
)
from .schedule import (
    NoiseSchedule,
    build_schedule,
    cumulative,
    stationary_distribution,
    transition_matrix,
)

__version__ = "0.1.0"
