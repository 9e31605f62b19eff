"""Token-importance scoring and retained-set selection.

Five policies share one selection routine: FullCache (never evicts),
StreamLLM (sinks + sliding window), H2O (accumulated attention), Scissorhands
(attention summed over a history window), and the value-aware variants of the
last two, which multiply the attention score by the token's value-vector norm
and always keep the first ``sink_count`` tokens.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction

import numpy as np

from .core_math import NormOrder, parse_norm_order
from .errors import InvalidConfig, InvalidInput
from .kv_cache import HeadCache

SCISSORHANDS_LOCAL_WINDOW = 10


class PolicyKind(str, Enum):
    FULL = "FullCache"
    STREAMLLM = "StreamLLM"
    H2O = "H2O"
    SCISSORHANDS = "Scissorhands"


_KIND_ALIASES = {
    "full": PolicyKind.FULL,
    "fullcache": PolicyKind.FULL,
    "streamllm": PolicyKind.STREAMLLM,
    "streaming": PolicyKind.STREAMLLM,
    "h2o": PolicyKind.H2O,
    "scissorhands": PolicyKind.SCISSORHANDS,
}


class BudgetClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind = PolicyKind.H2O
    vatp: bool = False
    budget_ratio: float = 0.5
    sink_count: int = 20
    # None picks the per-kind default: k/2 for H2O, 10 for Scissorhands,
    # k - sink_count for StreamLLM.
    local_window: int | None = None
    history_window: int = 400
    norm_order: NormOrder = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PolicyKind(self.kind))
            object.__setattr__(self, "norm_order", parse_norm_order(self.norm_order))
        except (ValueError, InvalidInput) as exc:
            raise InvalidConfig(str(exc)) from None
        if self.vatp and self.kind not in (PolicyKind.H2O, PolicyKind.SCISSORHANDS):
            raise InvalidConfig(f"vatp is only defined for H2O and Scissorhands, not {self.kind.value}")
        if not 0.0 < self.budget_ratio <= 1.0:
            raise InvalidConfig(f"budget_ratio must be in (0, 1], got {self.budget_ratio}")
        if self.sink_count < 0:
            raise InvalidConfig("sink_count must be >= 0")
        if self.local_window is not None and self.local_window < 0:
            raise InvalidConfig("local_window must be >= 0")
        if self.history_window < 1:
            raise InvalidConfig("history_window must be >= 1")

    @classmethod
    def from_label(cls, label: str, **overrides) -> PolicyConfig:
        """Build from labels such as ``h2o``, ``scissorhands+vatp`` or ``full``."""
        name, _, suffix = label.strip().lower().partition("+")
        if name not in _KIND_ALIASES or suffix not in ("", "vatp"):
            raise InvalidConfig(f"unknown policy {label!r}")
        return cls(kind=_KIND_ALIASES[name], vatp=suffix == "vatp", **overrides)

    @property
    def label(self) -> str:
        base = {
            PolicyKind.FULL: "full",
            PolicyKind.STREAMLLM: "streamllm",
            PolicyKind.H2O: "h2o",
            PolicyKind.SCISSORHANDS: "scissorhands",
        }[self.kind]
        return base + ("+vatp" if self.vatp else "")

    @property
    def protects_sinks(self) -> bool:
        return self.vatp or self.kind is PolicyKind.STREAMLLM

    def with_ratio(self, ratio: float) -> PolicyConfig:
        return replace(self, budget_ratio=ratio)


@dataclass(frozen=True)
class Budget:
    requested: int  # floor(ratio * tokens seen), at least 1
    effective: int  # after clamping to sinks + local window
    sinks: int  # forced-retention prefix length (0 when sinks are not protected)
    local: int

    @property
    def clamped(self) -> bool:
        return self.effective > self.requested


def budget_slots(ratio: float, n_tokens: int) -> int:
    # Fraction avoids floor(0.29 * 100) == 28.
    exact = Fraction(ratio).limit_denominator(1_000_000) * n_tokens
    return max(1, math.floor(exact))


def derive_budget(cfg: PolicyConfig, n_tokens: int) -> Budget:
    k = budget_slots(cfg.budget_ratio, n_tokens)
    sinks = cfg.sink_count if cfg.protects_sinks else 0
    if cfg.local_window is not None:
        local = cfg.local_window
    elif cfg.kind is PolicyKind.H2O:
        local = k // 2
    elif cfg.kind is PolicyKind.SCISSORHANDS:
        local = SCISSORHANDS_LOCAL_WINDOW
    elif cfg.kind is PolicyKind.STREAMLLM:
        local = max(k - sinks, 1)
    else:
        local = k
    return Budget(requested=k, effective=max(k, sinks + local), sinks=sinks, local=local)


def score_h2o(cache: HeadCache) -> np.ndarray:
    return cache.acc_scores.copy()


def score_scissorhands(cache: HeadCache) -> np.ndarray:
    # Rolling sums can dip a few ulps below zero once old rows roll out.
    return np.maximum(cache.window_sums, 0.0)


def apply_vatp(scores: np.ndarray, cache: HeadCache) -> np.ndarray:
    if scores.shape != (len(cache),):
        raise InvalidInput(f"{scores.shape[0]} scores for {len(cache)} slots")
    return scores * cache.value_norms


def importance(cache: HeadCache, cfg: PolicyConfig) -> np.ndarray | None:
    """Per-slot importance under ``cfg``; None for positional-only policies."""
    if cfg.kind is PolicyKind.H2O:
        scores = score_h2o(cache)
    elif cfg.kind is PolicyKind.SCISSORHANDS:
        scores = score_scissorhands(cache)
    else:
        return None
    if cfg.vatp:
        scores = apply_vatp(scores, cache)
    return scores


def select_retained(scores: np.ndarray | None, cache: HeadCache, cfg: PolicyConfig) -> np.ndarray:
    """Positions to keep: protected sinks, the local window, then the top scores.

    Heavy-hitter ties go to the more recent token.
    """
    n = len(cache)
    positions = cache.positions
    budget = derive_budget(cfg, cache.seen)
    if budget.clamped:
        warnings.warn(
            f"{cfg.label}: budget {budget.requested} below sinks+local window, "
            f"clamped to {budget.effective}",
            BudgetClampWarning,
            stacklevel=2,
        )
    if cfg.kind is PolicyKind.FULL or n <= budget.effective:
        return positions.copy()
    if scores is not None and scores.shape != (n,):
        raise InvalidInput(f"{scores.shape[0]} scores for {n} slots")

    keep = np.zeros(n, dtype=bool)
    if budget.sinks:
        keep |= positions < budget.sinks
    if budget.local:
        keep[max(0, n - budget.local):] = True
    remaining = budget.effective - int(keep.sum())
    if cfg.kind is not PolicyKind.STREAMLLM and remaining > 0:
        if scores is None:
            raise InvalidInput(f"{cfg.label} needs importance scores")
        cand = np.flatnonzero(~keep)
        order = np.lexsort((-positions[cand], -scores[cand]))
        keep[cand[order[:remaining]]] = True
    return positions[keep].copy()


@dataclass
class EvictionReport:
    layer: int
    head: int
    seen: int
    budget: Budget
    scores: np.ndarray | None
    retained: np.ndarray
    evicted: np.ndarray
    slots_before: int


def enforce_budget(cache: HeadCache, cfg: PolicyConfig) -> EvictionReport:
    n_before = len(cache)
    budget = derive_budget(cfg, cache.seen)
    if cfg.kind is PolicyKind.FULL:
        scores = None
        retained = cache.positions.copy()
    else:
        scores = importance(cache, cfg)
        retained = select_retained(scores, cache, cfg)
    evicted = np.setdiff1d(cache.positions, retained, assume_unique=True)
    if evicted.size:
        cache.evict(evicted, protect_sinks=cfg.protects_sinks)
    cache.budget = budget.effective
    return EvictionReport(
        layer=cache.layer,
        head=cache.head,
        seen=cache.seen,
        budget=budget,
        scores=scores,
        retained=retained,
        evicted=evicted,
        slots_before=n_before,
    )
