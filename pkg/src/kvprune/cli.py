"""Command-line entry point: ``kvprune sweep | compare | trace {record,replay,synth}``."""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click

from .decoder import build_model, make_prompt, run_generation
from .errors import InvalidConfig, InvalidSpec, InvalidTrace
from .harness import (
    ExperimentConfig,
    compare_vatp,
    config_from_values,
    format_compare_table,
    load_config,
    run_sweep,
    schema_help,
)
from .policy import PolicyConfig
from .trace import SyntheticTraceSpec, read_trace, record_trajectory, replay, synthesize, write_trace

EXIT_INVALID = 2
EXIT_IO = 1

_EPILOG = "\b\nConfig file keys (flat 'key = value', '#' comments):\n" + schema_help()


def _fail(message: str, code: int) -> None:
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


def _experiment(ctx: click.Context) -> ExperimentConfig:
    opts = ctx.obj
    overrides = {}
    if opts["seed"] is not None:
        overrides["model.seed"] = opts["seed"]
    if opts["out"] is not None:
        overrides["experiment.output_dir"] = opts["out"]
    try:
        if opts["config"] is None:
            return config_from_values(overrides)
        return load_config(opts["config"], overrides)
    except InvalidConfig as exc:
        _fail(str(exc), EXIT_INVALID)


def _policy(label: str, ratio: float, cfg: ExperimentConfig | None = None, **fields) -> PolicyConfig:
    shared = {}
    if cfg is not None:
        base = cfg.policies[0]
        shared = dict(
            sink_count=base.sink_count,
            local_window=base.local_window,
            history_window=base.history_window,
            norm_order=base.norm_order,
        )
    shared.update({k: v for k, v in fields.items() if v is not None})
    try:
        return PolicyConfig.from_label(label, budget_ratio=ratio, **shared)
    except InvalidConfig as exc:
        _fail(str(exc), EXIT_INVALID)


@click.group(epilog=_EPILOG)
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="Experiment config file (defaults to the built-in desk preset).")
@click.option("--seed", type=int, default=None, help="Override model.seed (first of the repeat seeds).")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Override experiment.output_dir.")
@click.pass_context
def main(ctx: click.Context, config, seed, out):
    """Desk-scale KV-cache pruning simulator: H2O, Scissorhands, StreamLLM and VATP."""
    if config is not None and not Path(config).is_file():
        _fail(f"config file not found: {config}", EXIT_INVALID)
    ctx.obj = {"config": config, "seed": seed, "out": out}


@main.command(epilog=_EPILOG)
@click.pass_context
def sweep(ctx):
    """Run every policy x budget ratio x seed cell and write sweep.csv."""
    cfg = _experiment(ctx)
    try:
        result = run_sweep(cfg)
    except OSError as exc:
        _fail(str(exc), EXIT_IO)
    click.echo(f"{len(result.reports)} cells -> {result.run_dir / 'sweep.csv'}")


@main.command(epilog=_EPILOG)
@click.pass_context
def compare(ctx):
    """Count seeds where each VATP variant beats, ties or loses to its baseline."""
    cfg = _experiment(ctx)
    try:
        rows, run_dir = compare_vatp(cfg)
    except OSError as exc:
        _fail(str(exc), EXIT_IO)
    click.echo(format_compare_table(rows))
    click.echo(f"-> {run_dir / 'compare.csv'}")


@main.group()
def trace():
    """Record, replay and synthesize attention traces (KVTRACE v1 files)."""


@trace.command("record")
@click.option("--policy", "label", default="full", show_default=True, help="Policy label, e.g. h2o+vatp.")
@click.option("--ratio", type=float, default=1.0, show_default=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True)
@click.option("--decimal", is_flag=True, help="Write human-readable decimals instead of hex floats.")
@click.pass_context
def trace_record(ctx, label, ratio, output, decimal):
    """Run one closed-loop generation (first seed of the config) and save its trace."""
    cfg = _experiment(ctx)
    policy = _policy(label, ratio, cfg)
    model = build_model(cfg.model)
    prompt = make_prompt(cfg.model.seed, cfg.prompt_len, cfg.model.vocab_size)
    traj = run_generation(model, prompt, policy, cfg.gen_steps, keep_outputs=True)
    tr = record_trajectory(traj)
    try:
        write_trace(tr, output, decimal=decimal)
    except OSError as exc:
        _fail(f"cannot write {output}: {exc.strerror}", EXIT_IO)
    click.echo(f"{len(tr)} records -> {output}")


@trace.command("replay")
@click.argument("trace_file", type=click.Path(dir_okay=False))
@click.option("--policy", "label", default="h2o", show_default=True)
@click.option("--ratio", type=float, default=0.5, show_default=True)
@click.option("--sink-count", type=int, default=None, help="Override policy.sink_count.")
@click.option("--history-window", type=int, default=None, help="Override policy.history_window.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None,
              help="Write the eviction sequence as CSV.")
@click.pass_context
def trace_replay(ctx, trace_file, label, ratio, sink_count, history_window, csv_path):
    """Open-loop replay: evictions cannot change later attention rows."""
    cfg = _experiment(ctx) if ctx.obj["config"] else None
    try:
        tr = read_trace(trace_file)
    except InvalidTrace as exc:
        _fail(str(exc), EXIT_INVALID)
    policy = _policy(label, ratio, cfg, sink_count=sink_count, history_window=history_window,
                     norm_order=tr.norm_order)
    try:
        report = replay(tr, policy)
    except (InvalidTrace, InvalidConfig) as exc:
        _fail(str(exc), EXIT_INVALID)
    evicted = sum(len(s.evicted) for s in report.steps)
    click.echo(
        f"policy={report.policy} records={len(tr)} enforcement_points={len(report.steps)} "
        f"evicted={evicted} mode={'open-loop' if report.open_loop else 'closed-loop'}"
    )
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "layer", "head", "retained", "evicted_positions"))
            for s in report.steps:
                w.writerow((s.step, s.layer, s.head, len(s.retained), " ".join(map(str, s.evicted))))


@trace.command("synth")
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True)
@click.option("--length", type=int, default=64, show_default=True)
@click.option("--sinks", default="0,1", show_default=True, help="Comma-separated sink positions.")
@click.option("--sink-mass", type=float, default=0.8, show_default=True)
@click.option("--sink-norm", type=float, default=0.0, show_default=True)
@click.option("--norm-range", type=(float, float), default=(0.5, 2.0), show_default=True)
@click.option("--d-head", type=int, default=8, show_default=True)
@click.option("--layers", type=int, default=1, show_default=True)
@click.option("--heads", type=int, default=1, show_default=True)
@click.option("--prompt-len", type=int, default=None, help="Defaults to length // 2.")
@click.option("--decimal", is_flag=True)
@click.pass_context
def trace_synth(ctx, output, length, sinks, sink_mass, sink_norm, norm_range, d_head, layers, heads,
                prompt_len, decimal):
    """Generate a synthetic attention-sink trace."""
    seed = ctx.obj["seed"] or 0
    try:
        spec = SyntheticTraceSpec(
            length=length,
            sink_positions=tuple(int(x) for x in sinks.split(",") if x.strip()),
            sink_attention_mass=sink_mass,
            sink_value_norm=sink_norm,
            background_norm_range=norm_range,
            seed=seed,
            d_head=d_head,
            n_layers=layers,
            n_heads=heads,
            prompt_len=prompt_len,
        )
    except (InvalidSpec, ValueError) as exc:
        _fail(str(exc), EXIT_INVALID)
    tr = synthesize(spec)
    try:
        write_trace(tr, output, decimal=decimal)
    except OSError as exc:
        _fail(f"cannot write {output}: {exc.strerror}", EXIT_IO)
    click.echo(f"{len(tr)} records -> {output}")


if __name__ == "__main__":
    main()
