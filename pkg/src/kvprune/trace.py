"""Attention traces: recording, a line-based file format, open-loop replay, and
synthetic attention-sink traces.

File layout::

    KVTRACE v1
    #meta prompt_len=<n|-> norm=<1|2|inf> encoding=<hex|decimal>
    v1 <t> <layer> <head> <row: comma-separated floats> <position> <value_norm> <d_head>
    ...

Hex encoding (``float.hex``) round-trips bit-exactly; decimal uses ``repr`` and
is meant for eyeballing.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .core_math import NormOrder, lp_norm, parse_norm_order
from .decoder import StepOutput, Trajectory, XorShift64Star
from .errors import InvalidConfig, InvalidInput, InvalidSpec, InvalidTrace
from .kv_cache import ROW_SUM_TOL, HeadCache
from .policy import PolicyConfig, enforce_budget

HEADER = "KVTRACE v1"
RECORD_TAG = "v1"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    layer: int
    head: int
    attention_row: np.ndarray
    position: int  # position of the token appended at this step
    value_norm: float
    value_dim: int

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return (
            (self.step, self.layer, self.head, self.position, self.value_dim)
            == (other.step, other.layer, other.head, other.position, other.value_dim)
            and _same_bits(self.value_norm, other.value_norm)
            and self.attention_row.shape == other.attention_row.shape
            and self.attention_row.tobytes() == other.attention_row.tobytes()
        )

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.step, self.layer, self.head)


def _same_bits(a: float, b: float) -> bool:
    return np.float64(a).tobytes() == np.float64(b).tobytes()


@dataclass
class Trace:
    records: list[TraceRecord]
    prompt_len: int | None = None  # pruning starts once this many tokens are seen
    norm_order: NormOrder = 1

    def __len__(self) -> int:
        return len(self.records)


def record(
    outputs: Sequence[StepOutput],
    *,
    prompt_len: int | None = None,
    norm_order: NormOrder = 1,
) -> Trace:
    """One record per (step, layer, head) from decoder step outputs."""
    records = []
    for out in outputs:
        for layer, heads in enumerate(out.heads):
            for head, hs in enumerate(heads):
                records.append(
                    TraceRecord(
                        step=out.position,
                        layer=layer,
                        head=head,
                        attention_row=hs.attention.copy(),
                        position=out.position,
                        value_norm=lp_norm(hs.value, norm_order),
                        value_dim=hs.value.shape[0],
                    )
                )
    return Trace(records, prompt_len=prompt_len, norm_order=norm_order)


def record_trajectory(traj: Trajectory) -> Trace:
    if traj.outputs is None:
        raise InvalidInput("trajectory was generated without keep_outputs=True")
    return record(traj.outputs, prompt_len=len(traj.prompt), norm_order=traj.policy.norm_order)


# -- file format ---------------------------------------------------------------


def _norm_label(p: NormOrder) -> str:
    return "inf" if p == math.inf else str(int(p))


def _fmt(x: float, decimal: bool) -> str:
    return repr(float(x)) if decimal else float(x).hex()


def write_trace(trace: Trace, out: TextIO | str | os.PathLike, *, decimal: bool = False) -> None:
    if not isinstance(out, (str, os.PathLike)):
        _write(trace, out, decimal)
        return
    with open(out, "w", encoding="ascii", newline="\n") as fh:
        _write(trace, fh, decimal)


def _write(trace: Trace, fh: TextIO, decimal: bool) -> None:
    pl = "-" if trace.prompt_len is None else str(trace.prompt_len)
    enc = "decimal" if decimal else "hex"
    fh.write(f"{HEADER}\n#meta prompt_len={pl} norm={_norm_label(trace.norm_order)} encoding={enc}\n")
    for r in trace.records:
        row = ",".join(_fmt(x, decimal) for x in r.attention_row)
        fh.write(
            f"{RECORD_TAG} {r.step} {r.layer} {r.head} {row} {r.position} "
            f"{_fmt(r.value_norm, decimal)} {r.value_dim}\n"
        )


def dumps(trace: Trace, *, decimal: bool = False) -> str:
    buf = io.StringIO()
    _write(trace, buf, decimal)
    return buf.getvalue()


def loads(text: str) -> Trace:
    return _read(io.StringIO(text))


def read_trace(path: str | os.PathLike) -> Trace:
    try:
        with open(path, "r", encoding="ascii", newline="") as fh:
            return _read(fh)
    except OSError as exc:
        raise InvalidTrace(f"cannot read {os.fspath(path)}: {exc.strerror}", line=0, offset=0) from exc


def _read(fh: TextIO) -> Trace:
    offset = 0
    lines = fh.readlines()
    if not lines or lines[0].rstrip("\n") != HEADER:
        raise InvalidTrace(f"missing {HEADER!r} header", line=1, offset=0)
    offset += len(lines[0].encode())
    meta = {"prompt_len": "-", "norm": "1", "encoding": "hex"}
    records: list[TraceRecord] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\n")
        try:
            if line.startswith("#meta"):
                for item in line.split()[1:]:
                    k, _, v = item.partition("=")
                    if k not in meta:
                        raise ValueError(f"unknown meta key {k!r}")
                    meta[k] = v
            elif line and not line.startswith("#"):
                records.append(_parse_record(line, meta["encoding"]))
        except (ValueError, IndexError) as exc:
            raise InvalidTrace(str(exc), line=lineno, offset=offset) from None
        offset += len(raw.encode())
    try:
        prompt_len = None if meta["prompt_len"] == "-" else int(meta["prompt_len"])
        norm = parse_norm_order(meta["norm"])
    except (ValueError, InvalidInput) as exc:
        raise InvalidTrace(f"bad #meta line: {exc}", line=2, offset=len(lines[0].encode())) from None
    if meta["encoding"] not in ("hex", "decimal"):
        raise InvalidTrace(f"unknown encoding {meta['encoding']!r}", line=2, offset=len(lines[0].encode()))
    trace = Trace(records, prompt_len=prompt_len, norm_order=norm)
    validate(trace)
    return trace


def _parse_record(line: str, encoding: str) -> TraceRecord:
    parts = line.split(" ")
    if len(parts) != 8 or parts[0] != RECORD_TAG:
        raise ValueError(f"expected 8 fields starting with {RECORD_TAG!r}, got {len(parts)}")
    conv = float.fromhex if encoding == "hex" else float
    row = np.array([conv(x) for x in parts[4].split(",")], dtype=np.float64)
    return TraceRecord(
        step=int(parts[1]),
        layer=int(parts[2]),
        head=int(parts[3]),
        attention_row=row,
        position=int(parts[5]),
        value_norm=conv(parts[6]),
        value_dim=int(parts[7]),
    )


def validate(trace: Trace) -> None:
    """Check ordering, uniqueness and the probability invariant of every row."""
    prev = None
    for i, r in enumerate(trace.records):
        if prev is not None and r.key <= prev:
            raise InvalidTrace(f"record {i} {r.key} is out of order after {prev}")
        prev = r.key
        row = r.attention_row
        if row.ndim != 1 or row.size == 0 or not np.isfinite(row).all() or (row < 0).any():
            raise InvalidTrace(f"record {i} has an invalid attention row")
        if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
            raise InvalidTrace(f"record {i} attention row sums to {float(row.sum())!r}")
        if not math.isfinite(r.value_norm) or r.value_norm < 0:
            raise InvalidTrace(f"record {i} has an invalid value norm")


# -- replay --------------------------------------------------------------------


@dataclass
class ReplayStep:
    step: int
    layer: int
    head: int
    scores: np.ndarray | None
    retained: np.ndarray
    evicted: np.ndarray


@dataclass
class ReplayReport:
    policy: str
    steps: list[ReplayStep] = field(default_factory=list)
    recon_errors: list[float] = field(default_factory=list)
    # Replay cannot feed evictions back into later attention rows.
    open_loop: bool = True

    @property
    def mean_recon_error(self) -> float:
        return float(np.mean(self.recon_errors)) if self.recon_errors else 0.0

    def eviction_sequence(self) -> list[tuple[int, int, int, tuple[int, ...]]]:
        return [(s.step, s.layer, s.head, tuple(int(p) for p in s.evicted)) for s in self.steps]


def replay(
    trace: Trace,
    cfg: PolicyConfig,
    *,
    values: dict[tuple[int, int], np.ndarray] | None = None,
) -> ReplayReport:
    """Feed recorded rows through fresh caches and the policy engine.

    A row either matches the replay cache slot-for-slot (a trace recorded
    under the same policy) or covers every token seen so far (a full-cache
    trace); in the latter case it is restricted to the retained positions and
    renormalised, which is exactly the softmax over the surviving logits.

    ``values`` maps (layer, head) to a (tokens, d_head) array of value vectors
    indexed by position; when given, the open-loop attention-output error of
    each decode step is recorded.
    """
    validate(trace)
    if parse_norm_order(cfg.norm_order) != trace.norm_order:
        raise InvalidConfig(
            f"policy norm order {cfg.norm_order} differs from the trace's {trace.norm_order}"
        )
    report = ReplayReport(policy=cfg.label)
    caches: dict[tuple[int, int], HeadCache] = {}
    seen_pos: dict[tuple[int, int], list[int]] = {}
    for i, r in enumerate(trace.records):
        lh = (r.layer, r.head)
        cache = caches.get(lh)
        if cache is None:
            cache = caches[lh] = HeadCache(
                r.value_dim,
                norm_order=trace.norm_order,
                history_window=cfg.history_window,
                sink_count=cfg.sink_count,
                layer=r.layer,
                head=r.head,
            )
            seen_pos[lh] = []
        if r.value_dim != cache.d_head:
            raise InvalidTrace(f"record {i} changes value_dim of head {lh}")
        # ||norm * e_1||_p == norm for every p, so the cached norm is the recorded one.
        placeholder = np.zeros(cache.d_head)
        placeholder[0] = r.value_norm
        try:
            cache.append(r.position, np.zeros(cache.d_head), placeholder)
        except InvalidInput as exc:
            raise InvalidTrace(f"record {i}: {exc}") from None
        seen_pos[lh].append(r.position)
        row = r.attention_row
        full = None
        if row.size == len(cache):
            aligned = row
            if row.size == cache.seen:
                full = row
        elif row.size == cache.seen:
            full = row
            idx = np.searchsorted(np.asarray(seen_pos[lh]), cache.positions)
            sub = row[idx]
            aligned = sub / sub.sum()
        else:
            raise InvalidTrace(
                f"record {i}: row of length {row.size} matches neither the {len(cache)} "
                f"retained slots nor the {cache.seen} tokens seen (recorded under another policy?)"
            )
        if values is not None and trace.prompt_len is not None and r.position >= trace.prompt_len:
            if full is None:
                raise InvalidTrace(f"record {i}: reconstruction error needs full-cache rows")
            v = values[lh]
            exact = full @ v[np.asarray(seen_pos[lh])]
            approx = aligned @ v[cache.positions]
            report.recon_errors.append(float(np.linalg.norm(approx - exact)))
        cache.record_attention(aligned)
        if trace.prompt_len is None or r.position >= trace.prompt_len - 1:
            ev = enforce_budget(cache, cfg)
            report.steps.append(ReplayStep(r.step, r.layer, r.head, ev.scores, ev.retained, ev.evicted))
    return report


# -- synthetic sink traces -----------------------------------------------------


@dataclass(frozen=True)
class SyntheticTraceSpec:
    length: int = 64
    sink_positions: tuple[int, ...] = (0, 1)
    sink_attention_mass: float = 0.8
    sink_value_norm: float = 0.0
    background_norm_range: tuple[float, float] = (0.5, 2.0)
    seed: int = 0
    d_head: int = 8
    n_layers: int = 1
    n_heads: int = 1
    prompt_len: int | None = None  # defaults to length // 2

    def __post_init__(self):
        object.__setattr__(self, "sink_positions", tuple(sorted(set(self.sink_positions))))
        lo, hi = self.background_norm_range
        if self.length < 1 or self.d_head < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise InvalidSpec("length, d_head, n_layers and n_heads must be >= 1")
        if not 0.0 < self.sink_attention_mass < 1.0:
            raise InvalidSpec(f"sink_attention_mass must be in (0, 1), got {self.sink_attention_mass}")
        if not self.sink_positions:
            raise InvalidSpec("at least one sink position is needed to place the sink mass")
        if any(not 0 <= p < self.length for p in self.sink_positions):
            raise InvalidSpec("sink positions must lie inside the trace")
        if not 0.0 <= lo <= hi:
            raise InvalidSpec(f"background_norm_range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.sink_value_norm < 0:
            raise InvalidSpec("sink_value_norm must be >= 0")
        if self.prompt_len is not None and not 1 <= self.prompt_len <= self.length:
            raise InvalidSpec("prompt_len must be in [1, length]")

    @property
    def effective_prompt_len(self) -> int:
        return self.prompt_len if self.prompt_len is not None else max(1, self.length // 2)


def _head_rng(spec: SyntheticTraceSpec, layer: int, head: int, stream: int) -> XorShift64Star:
    return XorShift64Star((spec.seed * 1_000_003 + layer * 1009 + head * 17 + stream) & ((1 << 64) - 1))


def synthetic_norms(spec: SyntheticTraceSpec, layer: int = 0, head: int = 0) -> np.ndarray:
    rng = _head_rng(spec, layer, head, 1)
    lo, hi = spec.background_norm_range
    norms = lo + (hi - lo) * rng.uniform_array(spec.length)
    norms[list(spec.sink_positions)] = spec.sink_value_norm
    return norms


def synthetic_values(spec: SyntheticTraceSpec, layer: int = 0, head: int = 0) -> np.ndarray:
    """Value vectors with random directions and the trace's l1 norms."""
    rng = _head_rng(spec, layer, head, 2)
    raw = 2.0 * rng.uniform_array(spec.length * spec.d_head).reshape(spec.length, spec.d_head) - 1.0
    raw /= np.abs(raw).sum(axis=1, keepdims=True)
    return raw * synthetic_norms(spec, layer, head)[:, None]


def synthetic_rows(spec: SyntheticTraceSpec, layer: int = 0, head: int = 0) -> list[np.ndarray]:
    """Causal attention rows: sinks split the sink mass equally, the rest is
    spread by per-token affinity times per-row jitter."""
    rng = _head_rng(spec, layer, head, 3)
    affinity = -np.log1p(-rng.uniform_array(spec.length))  # Exp(1)
    sinks = np.array(spec.sink_positions)
    rows = []
    for t in range(spec.length):
        n = t + 1
        is_sink = np.zeros(n, dtype=bool)
        is_sink[sinks[sinks < n]] = True
        n_sink = int(is_sink.sum())
        row = np.zeros(n)
        if n_sink == n:
            row[:] = 1.0 / n
        else:
            weights = affinity[:n] * (0.5 + rng.uniform_array(n))
            weights[is_sink] = 0.0
            rest = 1.0 - spec.sink_attention_mass if n_sink else 1.0
            row = rest * weights / weights.sum()
            if n_sink:
                row[is_sink] = spec.sink_attention_mass / n_sink
        rows.append(row)
    return rows


def synthesize(spec: SyntheticTraceSpec) -> Trace:
    per_head = {}
    for layer in range(spec.n_layers):
        for head in range(spec.n_heads):
            per_head[layer, head] = (synthetic_rows(spec, layer, head), synthetic_norms(spec, layer, head))
    records = []
    for t in range(spec.length):
        for layer in range(spec.n_layers):
            for head in range(spec.n_heads):
                rows, norms = per_head[layer, head]
                records.append(
                    TraceRecord(
                        step=t,
                        layer=layer,
                        head=head,
                        attention_row=rows[t],
                        position=t,
                        value_norm=float(norms[t]),
                        value_dim=spec.d_head,
                    )
                )
    return Trace(records, prompt_len=spec.effective_prompt_len, norm_order=1)


def synthetic_value_map(spec: SyntheticTraceSpec) -> dict[tuple[int, int], np.ndarray]:
    return {
        (layer, head): synthetic_values(spec, layer, head)
        for layer in range(spec.n_layers)
        for head in range(spec.n_heads)
    }
