"""KV-cache eviction policies with Gumbel-noised, temperature-annealed key-token scoring."""

from .analysis import (
    PRESETS,
    TrafficModel,
    attention_cdf,
    distribution_shift,
    entropy_experiment,
    kept_attention_mass,
    kv_traffic,
    threshold_sparsity,
)
from .decoder import Decoder, DecoderConfig, build_decoder, generate, synthetic_prompt
from .engine import EvictionEngine
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    IncompatibleTraceError,
    KvReduceError,
    TraceParseError,
    TraceVersionError,
)
from .numerics import (
    NoiseSpec,
    RngStream,
    TauSchedule,
    damp,
    entropy,
    gumbel_cdf,
    gumbel_pdf,
    reduced_softmax,
    sample_noise,
    softmax,
    tau_at,
    tempered_softmax,
)
from .policy import KvCache, PolicySpec, keyformer_indices, select_keyformer, step_evict
from .scores import ScoreAccumulator, ScoreState, init_state, keyformer_increment
from .trace import AttentionTrace, KeptTimeline, divergence_step, overlap, read_trace, replay, write_trace

__version__ = "0.1.0"
