"""Budgeted configuration search for multi-step analytic pipelines."""

from .benchmarks import default_benchmark_spec
from .cache import CachePool, CachedStep, prefix_cache_key, run_pipeline_with_cache
from .design import (
    DesignState,
    OnlineDesigner,
    d_criterion,
    generate_candidates,
    greedy_batch_design,
    greedy_online_next,
)
from .errors import FlashError
from .executor import (
    DatasetHandle,
    ExternalExecutor,
    RunResult,
    StepResult,
    SyntheticBenchmark,
    SyntheticExecutor,
    make_synthetic,
    make_synthetic_executor,
    spawn_external,
)
from .finetune import (
    DensityModel,
    HistoryRecord,
    HistorySet,
    build_model,
    propose,
    update,
)
from .graph import (
    AlgorithmSpec,
    HyperparamSpec,
    PipelinePath,
    PipelineSpec,
    Step,
    count_paths,
    decode_path,
    default_hyperparams,
    encode_path,
    enumerate_paths,
    is_valid_path,
    load_spec,
    prune_to_subgraph,
    sample_random_hyperparams,
    sample_random_path,
    save_spec,
    spec_digest,
)
from .orchestrator import (
    BudgetConfig,
    PhaseBudget,
    TuningOutcome,
    phase1_initialize,
    phase2_prune,
    phase3_finetune,
    random_search,
    report,
    run_flash,
)
from .surrogate import (
    CandidateSet,
    LinearSurrogate,
    ObservationSet,
    Prediction,
    eips,
    expected_improvement,
    fit_cost_model,
    fit_ridge,
    log_expected_improvement,
    predict,
    predict_batch,
    rank_paths_by_eips,
    select_next_path,
)
from .trace import TRACE_HEADER, TraceRow, TraceWriter, read_trace

__version__ = "0.1.0"
