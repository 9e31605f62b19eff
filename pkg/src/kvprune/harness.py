"""Budget sweeps, VATP win/tie/loss tables, and the flat config format.

Config files are ``key = value`` lines with dotted keys; ``#`` starts a
comment. See :data:`CONFIG_SCHEMA` for every key.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core_math import parse_norm_order
from .decoder import (
    ExperimentReport,
    ModelConfig,
    PrefillSnapshot,
    build_model,
    compare_to_reference,
    make_prompt,
    run_generation,
    run_prefill,
)
from .errors import InvalidConfig, InvalidInput
from .policy import PolicyConfig, PolicyKind

CSV_COLUMNS = (
    "policy",
    "vatp",
    "ratio",
    "seed",
    "token_match_rate",
    "attn_recon_error",
    "divergence_step",
    "kv_bytes",
    "aux_bytes",
)
CSV_SCHEMA_VERSION = 1

COMPARE_COLUMNS = (
    "policy",
    "vatp",
    "ratio",
    "baseline",
    "mean_attn_recon_error",
    "mean_token_match_rate",
    "recon_better",
    "recon_tied",
    "recon_worse",
    "match_better",
    "match_tied",
    "match_worse",
)

DEFAULT_POLICIES = ("full", "streamllm", "h2o", "h2o+vatp", "scissorhands", "scissorhands+vatp")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prompt_len: int = 256
    gen_steps: int = 64
    policies: tuple[PolicyConfig, ...] = tuple(PolicyConfig.from_label(p) for p in DEFAULT_POLICIES)
    budget_ratios: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    repeats: int = 20
    output_dir: Path = Path("runs")
    workers: int = 1

    def __post_init__(self):
        if self.prompt_len < 1:
            raise InvalidConfig("experiment.prompt_len must be >= 1")
        if self.gen_steps < 0:
            raise InvalidConfig("experiment.gen_steps must be >= 0")
        if self.repeats < 1:
            raise InvalidConfig("experiment.repeats must be >= 1")
        if not self.budget_ratios or any(not 0.0 < r <= 1.0 for r in self.budget_ratios):
            raise InvalidConfig("experiment.budget_ratios must be non-empty and each in (0, 1]")
        if not self.policies:
            raise InvalidConfig("experiment.policies must not be empty")
        if self.workers < 1:
            raise InvalidConfig("experiment.workers must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return [self.model.seed + r for r in range(self.repeats)]


# -- config file -------------------------------------------------------------


def _int(s: str) -> int:
    return int(s, 0)


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("auto", "none", "") else int(s, 0)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _labels(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _norm(s: str):
    return parse_norm_order(s)


# key -> (parser, default, help)
CONFIG_SCHEMA: dict[str, tuple[Callable[[str], object], object, str]] = {
    "model.n_layers": (_int, 2, "decoder layers"),
    "model.n_heads": (_int, 4, "attention heads per layer"),
    "model.d_head": (_int, 8, "per-head key/value width"),
    "model.d_model": (_opt_int, None, "residual width; must equal n_heads*d_head (auto)"),
    "model.vocab_size": (_int, 64, "vocabulary size (>= 2)"),
    "model.seed": (_int, 0, "first seed; repeat r uses seed + r for weights and prompt"),
    "model.sink_mode": (_bool, False, "bias attention toward the first sink_count positions"),
    "model.sink_count": (_int, 2, "number of sink-inducing positions in sink mode"),
    "model.sink_logit_bonus": (float, 4.0, "logit added to sink positions in sink mode"),
    "model.sink_value_scale": (float, 0.05, "multiplier on sink value vectors in sink mode"),
    "experiment.prompt_len": (_int, 256, "prompt tokens per run"),
    "experiment.gen_steps": (_int, 64, "greedy decode steps per run"),
    "experiment.repeats": (_int, 20, "number of seeds"),
    "experiment.budget_ratios": (_floats, (0.25, 0.5, 0.75, 1.0), "comma-separated ratios in (0, 1]"),
    "experiment.policies": (
        _labels,
        DEFAULT_POLICIES,
        "comma-separated: full, streamllm, h2o, scissorhands, with optional +vatp",
    ),
    "experiment.output_dir": (str, "runs", "directory that receives the run folder"),
    "experiment.workers": (_int, 1, "parallel worker processes (results do not depend on it)"),
    "policy.sink_count": (_int, 20, "F: leading tokens always kept by StreamLLM and VATP"),
    "policy.local_window": (_opt_int, None, "recent tokens always kept; auto = k/2 (H2O), 10 (Scissorhands), k-F (StreamLLM)"),
    "policy.history_window": (_int, 400, "w: Scissorhands history window in steps"),
    "policy.norm_order": (_norm, 1, "value norm for VATP: 1, 2 or inf"),
}


def schema_help() -> str:
    width = max(len(k) for k in CONFIG_SCHEMA)
    lines = []
    for key, (_, default, doc) in CONFIG_SCHEMA.items():
        shown = _format_value(default)
        lines.append(f"{key:<{width}}  {doc} [default: {shown}]")
    return "\n".join(lines)


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value'")
        if key not in CONFIG_SCHEMA:
            raise InvalidConfig(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        parser = CONFIG_SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except (ValueError, InvalidInput) as exc:
            raise InvalidConfig(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def config_from_values(values: dict[str, object]) -> ExperimentConfig:
    merged = {k: d for k, (_, d, _) in CONFIG_SCHEMA.items()}
    merged.update(values)
    model = ModelConfig(
        n_layers=merged["model.n_layers"],
        n_heads=merged["model.n_heads"],
        d_head=merged["model.d_head"],
        d_model=merged["model.d_model"],
        vocab_size=merged["model.vocab_size"],
        seed=merged["model.seed"],
        sink_mode=merged["model.sink_mode"],
        sink_count=merged["model.sink_count"],
        sink_logit_bonus=merged["model.sink_logit_bonus"],
        sink_value_scale=merged["model.sink_value_scale"],
    )
    shared = dict(
        sink_count=merged["policy.sink_count"],
        local_window=merged["policy.local_window"],
        history_window=merged["policy.history_window"],
        norm_order=merged["policy.norm_order"],
    )
    policies = tuple(PolicyConfig.from_label(label, **shared) for label in merged["experiment.policies"])
    return ExperimentConfig(
        model=model,
        prompt_len=merged["experiment.prompt_len"],
        gen_steps=merged["experiment.gen_steps"],
        policies=policies,
        budget_ratios=merged["experiment.budget_ratios"],
        repeats=merged["experiment.repeats"],
        output_dir=Path(merged["experiment.output_dir"]),
        workers=merged["experiment.workers"],
    )


def load_config(path: str | os.PathLike, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config file {p}: {exc.strerror}") from None
    values = parse_config_text(text, source=str(p))
    values.update(overrides or {})
    return config_from_values(values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parsing it back yields an equal config."""
    m = cfg.model
    shared = cfg.policies[0]
    values = {
        "model.n_layers": m.n_layers,
        "model.n_heads": m.n_heads,
        "model.d_head": m.d_head,
        "model.d_model": m.d_model,
        "model.vocab_size": m.vocab_size,
        "model.seed": m.seed,
        "model.sink_mode": m.sink_mode,
        "model.sink_count": m.sink_count,
        "model.sink_logit_bonus": repr(m.sink_logit_bonus),
        "model.sink_value_scale": repr(m.sink_value_scale),
        "experiment.prompt_len": cfg.prompt_len,
        "experiment.gen_steps": cfg.gen_steps,
        "experiment.repeats": cfg.repeats,
        "experiment.budget_ratios": ", ".join(repr(r) for r in cfg.budget_ratios),
        "experiment.policies": ", ".join(p.label for p in cfg.policies),
        "experiment.output_dir": cfg.output_dir.as_posix(),
        "experiment.workers": cfg.workers,
        "policy.sink_count": shared.sink_count,
        "policy.local_window": shared.local_window,
        "policy.history_window": shared.history_window,
        "policy.norm_order": shared.norm_order,
    }
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def run_stamp(cfg: ExperimentConfig) -> str:
    """Short hash of the result-affecting config (output_dir and workers excluded)."""
    text = dump_config(replace(cfg, output_dir=Path("."), workers=1))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# -- sweeps --------------------------------------------------------------------


def _run_seed(cfg: ExperimentConfig, seed: int) -> list[ExperimentReport]:
    model = build_model(replace(cfg.model, seed=seed))
    prompt = make_prompt(seed, cfg.prompt_len, cfg.model.vocab_size)
    snapshots: list[PrefillSnapshot] = []

    def prefilled_for(policy: PolicyConfig) -> PrefillSnapshot:
        for snap in snapshots:
            if snap.matches(policy):
                return snap
        snap = run_prefill(model, prompt, policy)
        snapshots.append(snap)
        return snap

    full = PolicyConfig(kind=PolicyKind.FULL, **_shared_fields(cfg.policies[0]))
    reference = run_generation(model, prompt, full, cfg.gen_steps, prefilled=prefilled_for(full))
    reports = []
    for policy in cfg.policies:
        for ratio in cfg.budget_ratios:
            p = policy.with_ratio(ratio)
            traj = run_generation(model, prompt, p, cfg.gen_steps, prefilled=prefilled_for(p))
            reports.append(compare_to_reference(traj, reference, seed))
    return reports


def _shared_fields(p: PolicyConfig) -> dict:
    return dict(
        sink_count=p.sink_count,
        local_window=p.local_window,
        history_window=p.history_window,
        norm_order=p.norm_order,
    )


def run_experiments(cfg: ExperimentConfig) -> list[ExperimentReport]:
    """All (policy, ratio, seed) cells, ordered policy-major, then ratio, then seed."""
    seeds = cfg.seeds
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(seeds), seeds))
    else:
        per_seed = [_run_seed(cfg, s) for s in seeds]
    n_ratios = len(cfg.budget_ratios)
    ordered = []
    for pi in range(len(cfg.policies)):
        for ri in range(n_ratios):
            for reports in per_seed:
                ordered.append(reports[pi * n_ratios + ri])
    return ordered


def format_float(x: float) -> str:
    return format(x, ".12g")


def write_sweep_csv(reports: Sequence[ExperimentReport], out) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(
            [
                r.kind,
                "true" if r.vatp else "false",
                repr(r.ratio),
                r.seed,
                format_float(r.token_match_rate),
                format_float(r.attn_recon_error),
                "" if r.divergence_step is None else r.divergence_step,
                r.kv_bytes,
                r.aux_bytes,
            ]
        )


def sweep_csv_text(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    write_sweep_csv(reports, buf)
    return buf.getvalue()


@dataclass
class SweepResult:
    config: ExperimentConfig
    reports: list[ExperimentReport]
    run_dir: Path | None = None

    @property
    def csv_text(self) -> str:
        return sweep_csv_text(self.reports)


def _prepare_run_dir(cfg: ExperimentConfig) -> Path:
    run_dir = cfg.output_dir / f"run-{run_stamp(cfg)}"
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
        (run_dir / "manifest.txt").write_text(
            f"stamp = {run_stamp(cfg)}\ncsv_schema = {CSV_SCHEMA_VERSION}\n"
            f"columns = {','.join(CSV_COLUMNS)}\n",
            encoding="utf-8",
        )
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write to output directory {run_dir}: {exc.strerror}") from exc
    return run_dir


def run_sweep(cfg: ExperimentConfig, *, write: bool = True) -> SweepResult:
    """Run every cell and (optionally) write ``sweep.csv`` into a config-stamped folder."""
    run_dir = _prepare_run_dir(cfg) if write else None
    reports = run_experiments(cfg)
    result = SweepResult(cfg, reports, run_dir)
    if run_dir is not None:
        (run_dir / "sweep.csv").write_text(result.csv_text, encoding="utf-8")
    return result


# -- VATP comparison ---------------------------------------------------------


def compare_pair(
    a: Sequence[ExperimentReport],
    b: Sequence[ExperimentReport],
    metric: str,
    higher_is_better: bool = False,
) -> tuple[int, int, int]:
    """(a better, tied, a worse) over seeds present in both."""
    by_seed = {r.seed: getattr(r, metric) for r in b}
    better = tied = worse = 0
    for r in a:
        if r.seed not in by_seed:
            continue
        x, y = getattr(r, metric), by_seed[r.seed]
        if x == y:
            tied += 1
        elif (x > y) == higher_is_better:
            better += 1
        else:
            worse += 1
    return better, tied, worse


@dataclass
class CompareRow:
    policy: str
    vatp: bool
    ratio: float
    baseline: str | None
    mean_attn_recon_error: float
    mean_token_match_rate: float
    recon: tuple[int, int, int] | None
    match: tuple[int, int, int] | None


def summarize_vatp(cfg: ExperimentConfig, reports: Sequence[ExperimentReport]) -> list[CompareRow]:
    """One row per (policy, ratio); VATP rows carry win/tie/loss counts vs their baseline."""
    cells: dict[tuple[int, float], list[ExperimentReport]] = {}
    it = iter(reports)
    for pi, _ in enumerate(cfg.policies):
        for ratio in cfg.budget_ratios:
            cells[pi, ratio] = [next(it) for _ in cfg.seeds]
    rows = []
    for pi, policy in enumerate(cfg.policies):
        baseline_idx = None
        if policy.vatp:
            for bi, other in enumerate(cfg.policies):
                if other.kind is policy.kind and not other.vatp:
                    baseline_idx = bi
                    break
        for ratio in cfg.budget_ratios:
            cell = cells[pi, ratio]
            recon = match = None
            if baseline_idx is not None:
                base = cells[baseline_idx, ratio]
                recon = compare_pair(cell, base, "attn_recon_error")
                match = compare_pair(cell, base, "token_match_rate", higher_is_better=True)
            rows.append(
                CompareRow(
                    policy=policy.label,
                    vatp=policy.vatp,
                    ratio=ratio,
                    baseline=cfg.policies[baseline_idx].label if baseline_idx is not None else None,
                    mean_attn_recon_error=float(np.mean([r.attn_recon_error for r in cell])),
                    mean_token_match_rate=float(np.mean([r.token_match_rate for r in cell])),
                    recon=recon,
                    match=match,
                )
            )
    return rows


def compare_csv_text(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        counts = list(r.recon or ("", "", "")) + list(r.match or ("", "", ""))
        w.writerow(
            [
                r.policy,
                "true" if r.vatp else "false",
                repr(r.ratio),
                r.baseline or "",
                format_float(r.mean_attn_recon_error),
                format_float(r.mean_token_match_rate),
                *counts,
            ]
        )
    return buf.getvalue()


def format_compare_table(rows: Sequence[CompareRow]) -> str:
    header = f"{'policy':<20} {'ratio':>6} {'recon err':>11} {'match':>7}  recon b/t/w  match b/t/w"
    lines = [header, "-" * len(header)]
    for r in rows:
        rc = "/".join(map(str, r.recon)) if r.recon else "-"
        mc = "/".join(map(str, r.match)) if r.match else "-"
        lines.append(
            f"{r.policy:<20} {r.ratio:>6.3g} {r.mean_attn_recon_error:>11.5f} "
            f"{r.mean_token_match_rate:>7.3f}  {rc:>11}  {mc:>11}"
        )
    return "\n".join(lines)


def compare_vatp(
    cfg: ExperimentConfig,
    *,
    reports: Sequence[ExperimentReport] | None = None,
    write: bool = True,
) -> tuple[list[CompareRow], Path | None]:
    run_dir = _prepare_run_dir(cfg) if write else None
    if reports is None:
        reports = run_experiments(cfg)
    rows = summarize_vatp(cfg, reports)
    if run_dir is not None:
        (run_dir / "sweep.csv").write_text(sweep_csv_text(reports), encoding="utf-8")
        (run_dir / "compare.csv").write_text(compare_csv_text(rows), encoding="utf-8")
    return rows, run_dir
