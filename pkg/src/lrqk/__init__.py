"""Low-rank query/key attention simulator.

Two-stage pipeline: joint rank-r factorization of the prompt's query/key
matrices, then per-token streaming compression during decode. Compressed
keys act as proxies for scoring and selecting the tokens kept resident in
a fast cache tier; attention itself always runs on original full-precision
rows, so selection is the only source of approximation.
"""

from lrqk.errors import (
    CorruptTraceError,
    NonFiniteError,
    SolveFailedError,
    UnsupportedVersionError,
)
from lrqk.linalg import as_matrix, as_row, fro_norm_sq, gram, solve_spd, topk_indices
from lrqk.prefill import (
    ImportanceScores,
    InitStrategy,
    LowRankFactors,
    PrefillConfig,
    PrefillRun,
    factor_residuals,
    importance_scores,
    init_factors,
    lagrangian_value,
    prefill_factorize,
    prefill_run,
    update_AK,
    update_AQ,
    update_B,
)
from lrqk.decode import (
    CompressedToken,
    DecodeConfig,
    DecodeWorkspace,
    TokenStep,
    decode_compress,
    khat_initial_guess,
    update_khat,
    update_projections,
    update_qhat,
)
from lrqk.cache import (
    CacheStats,
    SelectionSet,
    TieredKVCache,
    append_token,
    fetch_and_merge,
    miss_rate,
    proxy_scores,
    select_active,
    write_stats_csv,
)
from lrqk.attention import (
    AttentionResult,
    exact_attention,
    exact_topk,
    selection_recall,
)
from lrqk.workload import (
    SyntheticSpec,
    TraceRecord,
    as_heads,
    gen_lowrank_qk,
    gen_recency_biased,
    load_trace,
    neighbor_attention_profile,
    save_trace,
    singular_spectrum,
    write_profile_csv,
    write_spectrum_csv,
)
from lrqk.session import (
    DecodeSession,
    SessionConfig,
    SimulationResult,
    StepReport,
    run_simulation,
    summarize,
    write_report_csv,
)

__version__ = "0.1.0"
