"""KV-cache token pruning simulator: attention-only vs value-aware eviction."""

from .core_math import dot, lp_norm, matvec, mat64, stable_softmax, vec64
from .decoder import (
    DecoderState,
    ExperimentReport,
    ModelConfig,
    StepOutput,
    build_model,
    decode_step,
    generate,
    make_prompt,
    prefill,
    run_generation,
)
from .errors import (
    InvalidConfig,
    InvalidHandle,
    InvalidInput,
    InvalidSpec,
    InvalidTrace,
    KVPruneError,
    SinkProtected,
)
from .harness import ExperimentConfig, compare_vatp, load_config, run_sweep
from .kv_cache import CacheBytes, HeadCache, TokenSlot, memory_accounting
from .policy import (
    PolicyConfig,
    PolicyKind,
    apply_vatp,
    enforce_budget,
    score_h2o,
    score_scissorhands,
    select_retained,
)
from .trace import SyntheticTraceSpec, Trace, TraceRecord, read_trace, record, replay, synthesize, write_trace

__version__ = "0.1.0"
