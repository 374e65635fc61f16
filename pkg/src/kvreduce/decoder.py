"""A small deterministic causal decoder used to exercise eviction policies end to end.

Weights are drawn once from a seeded stream (no training). Activations are
float32; the attention logits handed to the eviction engine are widened to
float64 there. Two position encodings are supported: fixed sinusoidal absolute
embeddings added at the input, and ALiBi biases added to the attention logits.

With ``position_mode == "renumbered"`` a new token's position is its index in
the (reduced) cache rather than its index in the full sequence. For absolute
embeddings that only changes the new token's embedding (cached keys already
carry theirs); for ALiBi the query-to-key distances are measured in cache order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import EvictionEngine
from .errors import ConfigError, ContractError, DomainError
from .numerics import RngStream
from .policy import PolicySpec
from .trace import AttentionTrace, KeptTimeline, TraceRecord, divergence_step

POSITION_ENCODINGS = ("absolute_sinusoidal", "alibi")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    vocab: int = 256
    max_positions: int = 2048
    position_encoding: str = "absolute_sinusoidal"
    seed: int = 0
    init_std: float = 0.02
    # Multiplies the init std of the query/key projections. At 8 the top 40%
    # of tokens hold roughly 85% of the attention mass in the default model.
    qk_gain: float = 8.0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("layers and heads must be >= 1")
        if self.d_model < 1 or self.d_model % self.heads:
            raise ConfigError("d_model must be a positive multiple of heads")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ConfigError(f"unknown position encoding {self.position_encoding!r}")
        if not self.init_std > 0 or not self.qk_gain > 0:
            raise ConfigError("init_std and qk_gain must be > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DecoderConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric ALiBi slopes: ``2^(-8/n), 2^(-16/n), ...`` with the usual interleave for non powers of two."""

    def pow2(n):
        start = 2.0 ** (-8.0 / n)
        return [start ** (i + 1) for i in range(n)]

    if n_heads & (n_heads - 1) == 0:
        return np.array(pow2(n_heads))
    closest = 2 ** int(math.floor(math.log2(n_heads)))
    extra = alibi_slopes(2 * closest)[0::2][: n_heads - closest]
    return np.concatenate([pow2(closest), extra])


def sinusoidal_table(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.float32(0.7978845608) * (x + np.float32(0.044715) * x**3)))


def _softmax32(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Decoder:
    """Seeded random-weight decoder; weights are immutable after construction."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        gen = RngStream(cfg.seed, (0xDEC,)).generator
        d, V, std = cfg.d_model, cfg.vocab, cfg.init_std

        def draw(*shape, scale=1.0):
            return (gen.standard_normal(shape) * std * scale).astype(np.float32)

        self.wte = draw(V, d)
        self.blocks = []
        for _ in range(cfg.layers):
            self.blocks.append({
                "w_q": draw(d, d, scale=cfg.qk_gain),
                "w_k": draw(d, d, scale=cfg.qk_gain),
                "w_v": draw(d, d),
                "w_o": draw(d, d),
                "w_fc": draw(d, 4 * d),
                "w_proj": draw(4 * d, d),
            })
        self.w_head = draw(d, V)
        # Scaled so position and token embeddings have comparable magnitude.
        self.pos_table = (
            sinusoidal_table(cfg.max_positions, d) * np.float32(std * math.sqrt(2.0))
            if cfg.position_encoding == "absolute_sinusoidal" else None
        )
        self.slopes = alibi_slopes(cfg.heads).astype(np.float32) if cfg.position_encoding == "alibi" else None
        self.scale = np.float32(1.0 / math.sqrt(cfg.d_head))

    def embed(self, token_ids, positions) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise DomainError("token id outside vocabulary")
        x = self.wte[ids]
        if self.pos_table is not None:
            x = x + self.pos_table[np.asarray(positions, dtype=np.int64)]
        return x

    def _mlp(self, x: np.ndarray, blk: dict) -> np.ndarray:
        return x + _gelu(_layer_norm(x) @ blk["w_fc"]) @ blk["w_proj"]

    def head_logits(self, x: np.ndarray) -> np.ndarray:
        return _layer_norm(x) @ self.w_head

    def forward_full(self, token_ids, positions=None):
        """From-scratch causal pass over a whole sequence.

        Returns ``(vocab_logits (n, V), attention_logits)`` where
        ``attention_logits[l]`` has shape ``(H, n, n)`` with ``-inf`` above the
        diagonal.
        """
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        n = ids.size
        if positions is None:
            positions = np.arange(n)
        positions = np.asarray(positions, dtype=np.int64)
        H, dh = cfg.heads, cfg.d_head
        x = self.embed(ids, positions)
        causal = np.triu(np.ones((n, n), dtype=bool), 1)
        bias = None
        if self.slopes is not None:
            dist = (positions[:, None] - positions[None, :]).astype(np.float32)
            bias = -self.slopes[:, None, None] * dist[None]
        all_logits = []
        for blk in self.blocks:
            h = _layer_norm(x)
            q = (h @ blk["w_q"]).reshape(n, H, dh).transpose(1, 0, 2)
            k = (h @ blk["w_k"]).reshape(n, H, dh).transpose(1, 0, 2)
            v = (h @ blk["w_v"]).reshape(n, H, dh).transpose(1, 0, 2)
            att = (q @ k.transpose(0, 2, 1)) * self.scale
            if bias is not None:
                att = att + bias
            att = np.where(causal[None], np.float32(-np.inf), att).astype(np.float32)
            all_logits.append(att)
            out = (_softmax32(att) @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
            x = x + out @ blk["w_o"]
            x = self._mlp(x, blk)
        return self.head_logits(x), all_logits


def build_decoder(cfg: DecoderConfig) -> Decoder:
    return Decoder(cfg)


def synthetic_prompt(length: int, seed: int, vocab: int) -> list[int]:
    """Seeded random prompt of token ids in ``[0, vocab)``."""
    if length < 1:
        raise DomainError("prompt length must be >= 1")
    gen = RngStream(seed, (0x9A0,)).generator
    return gen.integers(0, vocab, size=length).tolist()


def parse_prompt(text: str) -> list[int]:
    """Whitespace-separated token ids."""
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise DomainError(f"bad prompt token: {exc}") from exc


def prefill(dec: Decoder, prompt, engine: EvictionEngine, records: list | None = None) -> np.ndarray:
    """Full causal pass over the prompt, fill and reduce the caches.

    Returns the vocabulary logits for the first generated token.
    """
    ids = np.asarray(prompt, dtype=np.int64)
    n = ids.size
    if n < 1:
        raise DomainError("prompt must hold at least one token")
    if n > dec.cfg.max_positions:
        raise DomainError(f"prompt length {n} exceeds max_positions {dec.cfg.max_positions}")
    if engine.layers != dec.cfg.layers or engine.heads != dec.cfg.heads:
        raise ContractError("engine shape does not match decoder")
    cfg = dec.cfg
    H, dh = cfg.heads, cfg.d_head
    x = dec.embed(ids, np.arange(n))
    causal = np.triu(np.ones((n, n), dtype=bool), 1)
    bias = None
    if dec.slopes is not None:
        dist = (np.arange(n)[:, None] - np.arange(n)[None, :]).astype(np.float32)
        bias = -dec.slopes[:, None, None] * dist[None]
    positions = np.arange(n)
    per_layer = []
    for l, blk in enumerate(dec.blocks):
        h = _layer_norm(x)
        q = (h @ blk["w_q"]).reshape(n, H, dh).transpose(1, 0, 2)
        k = (h @ blk["w_k"]).reshape(n, H, dh).transpose(1, 0, 2)
        v = (h @ blk["w_v"]).reshape(n, H, dh).transpose(1, 0, 2)
        for hd in range(H):
            engine.caches[l][hd].extend(positions, ids, k[hd], v[hd])
        att = (q @ k.transpose(0, 2, 1)) * dec.scale
        if bias is not None:
            att = att + bias
        att = np.where(causal[None], np.float32(-np.inf), att).astype(np.float32)
        per_layer.append([att[hd] for hd in range(H)])
        out = (_softmax32(att) @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + out @ blk["w_o"]
        x = dec._mlp(x, blk)
    if records is not None:
        for l in range(cfg.layers):
            for hd in range(H):
                att = per_layer[l][hd]
                for i in range(n):
                    records.append(TraceRecord(0, l, hd, i, positions[: i + 1].copy(),
                                               att[i, : i + 1].astype(np.float64)))
    engine.prompt_phase(per_layer)
    return dec.head_logits(x[-1])


def decode_step(
    dec: Decoder, token_id: int, t: int, engine: EvictionEngine, n_prompt: int, records: list | None = None
) -> np.ndarray:
    """Feed one generated token at step ``t >= 1``; returns next-token logits."""
    cfg = dec.cfg
    H, dh = cfg.heads, cfg.d_head
    mode = engine.spec.position_mode
    pos = n_prompt + t - 1
    sizes = set(engine.sizes())
    if len(sizes) != 1:
        raise ContractError("per-head caches disagree in size")
    m_before = sizes.pop()
    emb_pos = pos if mode == "original" else m_before
    if emb_pos >= cfg.max_positions:
        raise DomainError("sequence exceeds max_positions")
    x = dec.embed([token_id], [emb_pos])[0]
    step_logits = []
    for l, blk in enumerate(dec.blocks):
        h = _layer_norm(x)
        q = (h @ blk["w_q"]).reshape(H, dh)
        k = (h @ blk["w_k"]).reshape(H, dh)
        v = (h @ blk["w_v"]).reshape(H, dh)
        head_out = np.empty((H, dh), dtype=np.float32)
        layer_logits = []
        for hd in range(H):
            cache = engine.caches[l][hd]
            cache.append(pos, token_id, k[hd], v[hd])
            att = (cache.keys @ q[hd]) * dec.scale
            if dec.slopes is not None:
                if mode == "original":
                    dist = (pos - cache.positions).astype(np.float32)
                else:
                    dist = (len(cache) - 1 - np.arange(len(cache))).astype(np.float32)
                att = att - dec.slopes[hd] * dist
            att = att.astype(np.float32)
            layer_logits.append(att)
            head_out[hd] = _softmax32(att) @ cache.values
            if records is not None:
                records.append(TraceRecord(t, l, hd, pos, cache.positions.copy(), att.astype(np.float64)))
        step_logits.append(layer_logits)
        x = x + head_out.reshape(cfg.d_model) @ blk["w_o"]
        x = dec._mlp(x, blk)
    engine.generation_step(t, step_logits)
    return dec.head_logits(x)


@dataclass
class GenerationResult:
    tokens: list[int]
    timeline: KeptTimeline
    trace: AttentionTrace | None
    step_logits: list[np.ndarray] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def generate(
    dec: Decoder,
    prompt,
    T: int,
    spec: PolicySpec,
    seed: int = 0,
    record: bool = True,
    baseline: list[int] | None = None,
    keep_logits: bool = False,
) -> GenerationResult:
    """Greedy decoding of ``T`` tokens under ``spec``.

    Step 0 is the prompt pass; steps ``1..T`` each feed the previous token, so
    every generated token gets a query row (and the last step's vocabulary
    logits are discarded).
    """
    if T < 1:
        raise DomainError("generation length must be >= 1")
    prompt = [int(p) for p in prompt]
    n = len(prompt)
    if n + T > dec.cfg.max_positions:
        raise DomainError("prompt + generation exceeds max_positions")
    spec = spec.resolve(n)
    cfg = dec.cfg
    engine = EvictionEngine(spec, cfg.layers, cfg.heads, T, seed, cfg.d_head)
    records: list | None = [] if record else None
    logits = prefill(dec, prompt, engine, records)
    kept = [engine.kept()]
    sizes = [engine.sizes()[0]]
    all_logits = [logits] if keep_logits else []
    tokens: list[int] = []
    tok = int(np.argmax(logits))
    for t in range(1, T + 1):
        tokens.append(tok)
        logits = decode_step(dec, tok, t, engine, n, records)
        kept.append(engine.kept())
        sizes.append(engine.sizes()[0])
        if keep_logits and t < T:
            all_logits.append(logits)
        tok = int(np.argmax(logits))
    timeline = KeptTimeline(kept)
    trace = None
    if record:
        header = trace_header(cfg, prompt, T, seed, spec)
        trace = AttentionTrace(header, records)
    metrics = {
        "prompt_len": n,
        "gen_len": T,
        "k": spec.k,
        "w": spec.w,
        "cache_sizes": sizes,
    }
    if baseline is not None:
        metrics["divergence_step"] = divergence_step(tokens, baseline)
    return GenerationResult(tokens, timeline, trace, all_logits, metrics)


def trace_header(cfg: DecoderConfig, prompt, T: int, seed: int, spec: PolicySpec) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "decoder": cfg.to_json(),
        "layers": cfg.layers,
        "heads": cfg.heads,
        "prompt_len": len(prompt),
        "gen_len": T,
        "prompt": list(prompt),
        "seeds": {"weights": cfg.seed, "noise": seed},
        "policy": spec.to_json(),
    }
