"""coapipe: analogical chain-of-thought bootstrap pipeline for moderation.

Builds retrieval-conditioned reasoning chains over a labeled moderation
corpus, gates them on label agreement with a reflection loop, exports
trainer-ready SFT and preference-pair files, verifies the preference
objective and its gradients on a toy policy, and scores moderation outputs
(per-category F1, analogy-marker ratio, token cost).
"""

from .coagen import (
    AugmentedSample,
    PromptBundle,
    ReasoningChain,
    augment_dataset,
    build_generation_prompt,
    build_reflection_prompt,
    generate_chain,
    parse_chain,
    refine_chain,
    render_chain,
)
from .corpus import (
    DEFAULT_TAXONOMY,
    ModerationSample,
    SampleSet,
    Taxonomy,
    dedup,
    load_dataset,
    save_dataset,
    split_balanced,
)
from .dpo import (
    DpoConfig,
    TokenLogprobView,
    ToyPolicy,
    TrainTrace,
    dpo_grad,
    dpo_loss,
    dpo_loss_from_views,
    gradcheck,
    gradcheck_sft,
    sequence_logprob,
    sft_nll,
    train_toy_dpo,
)
from .exporter import (
    PreferencePair,
    SftRecord,
    build_preference_pairs,
    export_dpo,
    export_sft,
)
from .gateway import (
    BackendSpec,
    GenerationResult,
    Gateway,
    SamplingParams,
    request_fingerprint,
)
from .metrics import (
    CoaStats,
    ConfusionCounts,
    CostReport,
    EvalReport,
    coa_ratio,
    confusion,
    f1_report,
    token_cost,
)
from .retrieval import (
    RetrievalIndex,
    RetrievedCase,
    build_index,
    load_index,
    normalize,
    query_topk,
    save_index,
)

__version__ = "0.1.0"
