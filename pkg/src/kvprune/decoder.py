"""Seeded toy causal decoder with per-head KV caches.

Block structure (pre-norm, no learned gains, no biases)::

    x_0 = E[token] + PE(position)                 # sinusoidal PE
    for each layer:
        h  = rms_norm(x)
        for each head:  q, k, v = Wq h, Wk h, Wv h   # d_head each
                        a = softmax(K q / sqrt(d_head) [+ sink bonus])
                        o = sum_i a_i v_i
        x  = x + sum_heads Wo_head o
        x  = x + W2 relu(W1 rms_norm(x))            # d_ff = 4 d_model
    logits = U rms_norm(x)

All weights come from :class:`XorShift64Star` seeded through splitmix64 and
are uniform with unit variance scaled by ``1/sqrt(fan_in)``. In ``sink_mode``
the first ``sink_count`` positions receive a fixed logit bonus in every head
and their value vectors are multiplied by ``sink_value_scale``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core_math import NormOrder, rms_norm, stable_softmax
from .errors import InvalidConfig, InvalidInput
from .kv_cache import HeadCache
from .policy import EvictionReport, PolicyConfig, PolicyKind, enforce_budget

MASK64 = (1 << 64) - 1
_SQRT3 = math.sqrt(3.0)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D)."""

    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        """Float in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return int(self.uniform() * n)

    def uniform_array(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)])

    def weights(self, rows: int, cols: int, fan_in: int) -> np.ndarray:
        """Unit-variance uniform entries scaled by 1/sqrt(fan_in)."""
        u = self.uniform_array(rows * cols).reshape(rows, cols)
        return (2.0 * u - 1.0) * (_SQRT3 / math.sqrt(fan_in))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 8
    vocab_size: int = 64
    seed: int = 0
    d_model: int | None = None
    sink_mode: bool = False
    sink_count: int = 2
    sink_logit_bonus: float = 4.0
    sink_value_scale: float = 0.05

    def __post_init__(self):
        if self.d_model is None:
            object.__setattr__(self, "d_model", self.n_heads * self.d_head)
        for name in ("n_layers", "n_heads", "d_head", "d_model"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise InvalidConfig(
                f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must be >= 2")
        if not 0 <= self.seed <= MASK64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")
        if self.sink_count < 0 or self.sink_value_scale < 0:
            raise InvalidConfig("sink_count and sink_value_scale must be >= 0")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray  # (n_heads * d_head, d_model); rows h*d_head:(h+1)*d_head belong to head h
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (n_heads, d_model, d_head)
    w1: np.ndarray  # (d_ff, d_model)
    w2: np.ndarray  # (d_model, d_ff)


@dataclass(frozen=True)
class DecoderState:
    config: ModelConfig
    embedding: np.ndarray  # (vocab, d_model)
    unembedding: np.ndarray  # (vocab, d_model)
    layers: tuple[LayerWeights, ...]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _arrays(self):
        yield self.embedding
        yield self.unembedding
        for lw in self.layers:
            yield from (lw.wq, lw.wk, lw.wv, lw.wo, lw.w1, lw.w2)

    def new_caches(
        self,
        *,
        norm_order: NormOrder = 1,
        history_window: int = 400,
        sink_count: int = 0,
    ) -> list[list[HeadCache]]:
        c = self.config
        return [
            [
                HeadCache(
                    c.d_head,
                    norm_order=norm_order,
                    history_window=history_window,
                    sink_count=sink_count,
                    layer=layer,
                    head=head,
                )
                for head in range(c.n_heads)
            ]
            for layer in range(c.n_layers)
        ]

    def caches_for(self, policy: PolicyConfig) -> list[list[HeadCache]]:
        return self.new_caches(
            norm_order=policy.norm_order,
            history_window=policy.history_window,
            sink_count=policy.sink_count,
        )


def build_model(config: ModelConfig) -> DecoderState:
    c = config
    rng = XorShift64Star(c.seed)
    d, hd, H = c.d_model, c.d_head, c.n_heads
    embedding = rng.weights(c.vocab_size, d, 1)
    layers = []
    for _ in range(c.n_layers):
        wq = rng.weights(H * hd, d, d)
        wk = rng.weights(H * hd, d, d)
        wv = rng.weights(H * hd, d, d)
        wo = rng.weights(H * d, hd, d).reshape(H, d, hd)
        w1 = rng.weights(c.d_ff, d, d)
        w2 = rng.weights(d, c.d_ff, d)
        layers.append(LayerWeights(wq, wk, wv, wo, w1, w2))
    unembedding = rng.weights(c.vocab_size, d, d)
    return DecoderState(config=c, embedding=embedding, unembedding=unembedding, layers=tuple(layers))


@lru_cache(maxsize=8192)
def _position_encoding(position: int, d_model: int) -> np.ndarray:
    pe = np.empty(d_model)
    for i in range(0, d_model, 2):
        angle = position / (10000.0 ** (i / d_model))
        pe[i] = math.sin(angle)
        if i + 1 < d_model:
            pe[i + 1] = math.cos(angle)
    pe.setflags(write=False)
    return pe


def position_encoding(position: int, d_model: int) -> np.ndarray:
    return _position_encoding(position, d_model)


@dataclass
class HeadStep:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    attention: np.ndarray  # over retained slots + the new one, in cache order
    row_positions: np.ndarray
    output: np.ndarray  # sum_i a_i v_i


@dataclass
class StepOutput:
    position: int
    token: int
    heads: list[list[HeadStep]]  # [layer][head]
    logits: np.ndarray

    @property
    def attn_out(self) -> np.ndarray:
        """(n_layers, n_heads, d_head) stack of per-head attention outputs."""
        return np.array([[hs.output for hs in layer] for layer in self.heads])


Caches = list[list[HeadCache]]


def _forward(model: DecoderState, token: int, position: int, caches: Caches) -> StepOutput:
    c = model.config
    if not 0 <= token < c.vocab_size:
        raise InvalidInput(f"token id {token} outside vocabulary of {c.vocab_size}")
    if len(caches) != c.n_layers or any(len(row) != c.n_heads for row in caches):
        raise InvalidInput("cache grid does not match n_layers x n_heads")
    hd = c.d_head
    scale = 1.0 / math.sqrt(hd)
    x = model.embedding[token] + position_encoding(position, c.d_model)
    heads: list[list[HeadStep]] = []
    for lw, layer_caches in zip(model.layers, caches):
        h = rms_norm(x)
        q_all = lw.wq @ h
        k_all = lw.wk @ h
        v_all = lw.wv @ h
        attn = np.zeros(c.d_model)
        layer_steps = []
        for head, cache in enumerate(layer_caches):
            sl = slice(head * hd, (head + 1) * hd)
            q, k, v = q_all[sl], k_all[sl], v_all[sl]
            if c.sink_mode and position < c.sink_count:
                v = v * c.sink_value_scale
            cache.append(position, k, v)
            logits = (cache.keys @ q) * scale
            if c.sink_mode:
                logits = logits + np.where(cache.positions < c.sink_count, c.sink_logit_bonus, 0.0)
            a = stable_softmax(logits)
            o = a @ cache.values
            cache.record_attention(a)
            attn += lw.wo[head] @ o
            layer_steps.append(HeadStep(q, k, v, a, cache.positions.copy(), o))
        heads.append(layer_steps)
        x = x + attn
        x = x + lw.w2 @ np.maximum(lw.w1 @ rms_norm(x), 0.0)
    logits = model.unembedding @ rms_norm(x)
    return StepOutput(position=position, token=token, heads=heads, logits=logits)


def prefill(model: DecoderState, prompt: Sequence[int], caches: Caches) -> list[StepOutput]:
    """Run the prompt causally through empty caches, one row per token."""
    if len(prompt) < 1:
        raise InvalidInput("prompt must contain at least one token")
    if any(len(cache) for row in caches for cache in row):
        raise InvalidInput("prefill expects empty caches")
    return [_forward(model, int(tok), pos, caches) for pos, tok in enumerate(prompt)]


def decode_step(model: DecoderState, token: int, caches: Caches) -> StepOutput:
    """Append ``token`` after the last seen position and attend over the caches."""
    position = caches[0][0].seen
    return _forward(model, int(token), position, caches)


def argmax_token(logits: np.ndarray) -> int:
    return int(np.argmax(logits))  # first maximum, i.e. lowest token id


def make_prompt(seed: int, length: int, vocab_size: int) -> list[int]:
    """Deterministic pseudo-random prompt; independent of the weight stream."""
    rng = XorShift64Star(splitmix64(seed ^ 0x5EED_C0DE))
    return [rng.below(vocab_size) for _ in range(length)]


# -- closed-loop generation ----------------------------------------------------


@dataclass
class PrefillSnapshot:
    """Caches and outputs after prefill, reusable across policies."""

    prompt: tuple[int, ...]
    caches: Caches
    outputs: list[StepOutput]
    norm_order: NormOrder
    history_window: int
    sink_count: int

    def matches(self, policy: PolicyConfig) -> bool:
        return (
            self.norm_order == policy.norm_order
            and self.history_window == policy.history_window
            and self.sink_count == policy.sink_count
        )

    def clone_caches(self) -> Caches:
        return [[c.copy() for c in row] for row in self.caches]


def run_prefill(model: DecoderState, prompt: Sequence[int], policy: PolicyConfig) -> PrefillSnapshot:
    caches = model.caches_for(policy)
    outputs = prefill(model, prompt, caches)
    return PrefillSnapshot(
        prompt=tuple(int(t) for t in prompt),
        caches=caches,
        outputs=outputs,
        norm_order=policy.norm_order,
        history_window=policy.history_window,
        sink_count=policy.sink_count,
    )


@dataclass
class BudgetCheck:
    """Slot counts of one head at one enforcement point."""

    seen: int
    slots_before: int
    slots_after: int
    effective_budget: int


@dataclass
class Trajectory:
    policy: PolicyConfig
    prompt: tuple[int, ...]
    tokens: list[int]
    attn_outputs: np.ndarray  # (steps, n_layers, n_heads, d_head), decode steps only
    evictions: list[tuple[int, EvictionReport]]  # (query position, report)
    budget_checks: list[BudgetCheck]
    sink_evictions: int
    final_caches: Caches
    outputs: list[StepOutput] | None = None  # prefill + decode, if kept

    def memory(self):
        total = None
        for row in self.final_caches:
            for cache in row:
                m = cache.memory()
                total = m if total is None else total + m
        return total


def _enforce_all(caches: Caches, policy: PolicyConfig, position: int, traj: Trajectory) -> None:
    for row in caches:
        for cache in row:
            report = enforce_budget(cache, policy)
            traj.evictions.append((position, report))
            traj.sink_evictions += int((report.evicted < policy.sink_count).sum())
            traj.budget_checks.append(
                BudgetCheck(report.seen, report.slots_before, len(cache), report.budget.effective)
            )


def run_generation(
    model: DecoderState,
    prompt: Sequence[int],
    policy: PolicyConfig,
    steps: int,
    *,
    prefilled: PrefillSnapshot | None = None,
    keep_outputs: bool = False,
) -> Trajectory:
    """Greedy closed-loop generation, enforcing the budget after prefill and every step."""
    if steps < 0:
        raise InvalidInput("steps must be >= 0")
    if prefilled is None or not prefilled.matches(policy) or prefilled.prompt != tuple(prompt):
        prefilled = run_prefill(model, prompt, policy)
    caches = prefilled.clone_caches()
    c = model.config
    traj = Trajectory(
        policy=policy,
        prompt=prefilled.prompt,
        tokens=[],
        attn_outputs=np.zeros((steps, c.n_layers, c.n_heads, c.d_head)),
        evictions=[],
        budget_checks=[],
        sink_evictions=0,
        final_caches=caches,
        outputs=list(prefilled.outputs) if keep_outputs else None,
    )
    last = prefilled.outputs[-1]
    _enforce_all(caches, policy, last.position, traj)
    logits = last.logits
    for i in range(steps):
        tok = argmax_token(logits)
        traj.tokens.append(tok)
        out = decode_step(model, tok, caches)
        traj.attn_outputs[i] = out.attn_out
        if keep_outputs:
            traj.outputs.append(out)
        _enforce_all(caches, policy, out.position, traj)
        logits = out.logits
    return traj


@dataclass
class ExperimentReport:
    """Metrics of one pruned run against its full-cache reference."""

    policy: str
    kind: str
    vatp: bool
    ratio: float
    seed: int
    token_match_rate: float
    attn_recon_error: float
    divergence_step: int | None
    kv_bytes: int
    aux_bytes: int
    window_bytes: int
    full_kv_bytes: int
    sink_evictions: int
    max_budget_slack: float = 0.0  # worst |retained - ratio*seen| over heads/steps, in slots
    extra: dict = field(default_factory=dict)


def compare_to_reference(traj: Trajectory, reference: Trajectory, seed: int) -> ExperimentReport:
    steps = len(traj.tokens)
    if steps != len(reference.tokens):
        raise InvalidInput("reference run has a different number of steps")
    matches = [a == b for a, b in zip(traj.tokens, reference.tokens)]
    divergence = next((i for i, ok in enumerate(matches) if not ok), None)
    if steps:
        diff = traj.attn_outputs - reference.attn_outputs
        recon = float(np.sqrt((diff * diff).sum(axis=-1)).mean())
        match_rate = sum(matches) / steps
    else:
        recon, match_rate = 0.0, 1.0
    mem = traj.memory()
    full_slots = len(traj.prompt) + steps
    n_heads_total = sum(len(row) for row in traj.final_caches)
    d_head = traj.final_caches[0][0].d_head
    ratio = traj.policy.budget_ratio
    slack = max(
        (abs(bc.slots_after - ratio * bc.seen) for bc in traj.budget_checks),
        default=0.0,
    )
    if traj.policy.kind is PolicyKind.FULL:
        slack = max((abs(bc.slots_after - bc.seen) for bc in traj.budget_checks), default=0.0)
    return ExperimentReport(
        policy=traj.policy.label,
        kind=traj.policy.kind.value,
        vatp=traj.policy.vatp,
        ratio=ratio,
        seed=seed,
        token_match_rate=match_rate,
        attn_recon_error=recon,
        divergence_step=divergence,
        kv_bytes=mem.kv_bytes,
        aux_bytes=mem.aux_bytes,
        window_bytes=mem.window_bytes,
        full_kv_bytes=full_slots * 2 * d_head * 8 * n_heads_total,
        sink_evictions=traj.sink_evictions,
        max_budget_slack=float(slack),
    )


def generate(
    model: DecoderState,
    prompt: Sequence[int],
    policy: PolicyConfig,
    steps: int,
    *,
    reference: Trajectory | None = None,
    seed: int | None = None,
) -> tuple[list[int], ExperimentReport]:
    """Generate ``steps`` tokens under ``policy`` and score them against a full-cache run."""
    traj = run_generation(model, prompt, policy, steps)
    if reference is None:
        if policy.kind is PolicyKind.FULL:
            reference = traj
        else:
            reference = run_generation(model, prompt, PolicyConfig(kind=PolicyKind.FULL), steps)
    seed = model.config.seed if seed is None else seed
    return traj.tokens, compare_to_reference(traj, reference, seed)
