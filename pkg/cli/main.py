#!/usr/bin/env python3
"""
EdgeFM - Command Line Interface

Runs customization benchmarks, builds threshold tables, replays bandwidth
traces, runs end-to-end scenarios and the live edge/cloud pair.
"""

import csv
import json
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
from click import Context

from src import __version__
from src.config_manager import ConfigManager, RunConfig
from src.customizer import (
    SmallModel,
    TrainingLog,
    Variant,
    query_knowledge,
    save_checkpoint,
    split_holdout,
    train,
)
from src.embeddings import TextEmbeddingPool
from src.error_handler import EdgeFMError, InvariantViolationError, get_error_handler, handle_error
from src.fm_oracle import Sample, SampleStream, SyntheticWorld, fm_accuracy, fm_predict, fm_predict_batch
from src.live import CloudServer, connect_edge, summarize
from src.model_select import DeviceProfiler, ModelPool, ModelSpec
from src.netadapt import MBPS, AdaptationController, BandwidthEstimator, ThresholdTable, build_table, measure_latency
from src.nodes import CloudNode, EdgeNode
from src.simulator import run_scenario
from src.structured_logger import TraceManager, get_logger, setup_cli_logging

# Exit codes
EXIT_SUCCESS = 0
EXIT_USAGE_ERROR = 1
EXIT_INVARIANT_VIOLATION = 2

logger = get_logger("edgefm.cli")


class CLIError(Exception):
    """Custom exception for CLI errors."""

    def __init__(self, message: str, exit_code: int = EXIT_USAGE_ERROR):
        super().__init__(message)
        self.exit_code = exit_code


class EdgeFMGroup(click.Group):
    """Click group whose usage errors exit with status 1."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE_ERROR
        except click.Abort:
            click.echo("\nOperation cancelled by user", err=True)
            code = EXIT_USAGE_ERROR
        else:
            code = result if isinstance(result, int) else EXIT_SUCCESS
        if standalone_mode:
            sys.exit(code)
        return code


@contextmanager
def command_guard(operation: str):
    """Run a command under one trace id; failures become a diagnostic and an exit code."""
    with TraceManager() as trace:
        logger.debug(f"{operation} started with trace {trace.trace_id}")
        try:
            yield trace
        except CLIError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except InvariantViolationError as e:
            handle_error(e, {"operation": operation})
            click.echo(f"Error: {e}", err=True)
            for violation in e.violations[:20]:
                click.echo(f"  - {violation}", err=True)
            sys.exit(EXIT_INVARIANT_VIOLATION)
        except EdgeFMError as e:
            info = handle_error(e, {"operation": operation})
            click.echo(f"Error: {get_error_handler().create_user_friendly_message(info)}", err=True)
            sys.exit(EXIT_USAGE_ERROR)
        except KeyboardInterrupt:
            click.echo("\nOperation cancelled by user", err=True)
            sys.exit(EXIT_USAGE_ERROR)
        except OSError as e:
            handle_error(e, {"operation": operation})
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE_ERROR)


def load_config(ctx: Context) -> RunConfig:
    """Load and validate the run configuration named on the command line."""
    overrides = {"app.seed": ctx.obj.get("seed"), "output.directory": ctx.obj.get("out")}
    manager = ConfigManager(ctx.obj.get("config_file"), overrides=overrides)
    config = manager.require_valid()
    ctx.obj["config_manager"] = manager

    log = config.logging
    if log.format != "simple" or log.enable_file_logging:
        log_dir = str(Path(config.output.directory) / log.log_directory) if log.enable_file_logging else None
        setup_cli_logging(ctx.obj.get("verbose", 0), log.format, log_dir)
    return config


def prepare_output(ctx: Context, config: RunConfig, name: str) -> Path:
    """Create the command's output directory and record the effective configuration in it."""
    out_dir = Path(config.output.directory) / name
    if out_dir.exists() and not out_dir.is_dir():
        raise CLIError(f"Output path exists but is not a directory: {out_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx.obj["config_manager"].export_config(out_dir / "config.effective.toml")
    return out_dir


def selected_spec(config: RunConfig) -> ModelSpec:
    profiler = DeviceProfiler(ModelPool(config.get_model_specs()))
    profile = config.get_profile()
    profiler.register(profile)
    return profiler.select_for(profile.device_id)


def training_set(config: RunConfig, world: SyntheticWorld) -> List[Sample]:
    stream = SampleStream(world, config.pool_class_names(), seed=config.app.seed)
    return stream.take(config.customize.samples)


def calibration_set(config: RunConfig, world: SyntheticWorld) -> List[Sample]:
    stream = SampleStream(
        world, config.pool_class_names(), seed=config.app.seed + 1, start_id=config.customize.samples
    )
    return stream.take(config.netadapt.calibration_size)


def customized_model(
    config: RunConfig, world: SyntheticWorld, pool: TextEmbeddingPool, variant: Variant
) -> Tuple[SmallModel, TrainingLog]:
    spec = selected_spec(config)
    return train(
        world,
        pool,
        training_set(config, world),
        config.get_train_config(),
        variant,
        arch_id=spec.arch_id,
        hidden_dim=spec.hidden_dim,
    )


def threshold_table(config: RunConfig) -> ThresholdTable:
    """Customize the configured variant and tabulate it on a fresh calibration set."""
    world = config.create_world()
    pool = config.create_pool(world)
    model, _ = customized_model(config, world, pool, Variant.parse(config.scenario.variant))
    calibration = calibration_set(config, world)
    fm_answers = fm_predict_batch(world, pool, np.vstack([s.raw for s in calibration]))

    def cloud_predict(raw):
        return fm_predict(world, pool, raw)

    if config.latency.measure:
        latency = measure_latency(model, pool, calibration, cloud_predict, config.latency.sample_bits)
        logger.info(f"Measured t_edge={latency.t_edge_ms:.4f} ms, t_cloud={latency.t_cloud_ms:.4f} ms")
    else:
        latency = config.get_latency_model()
    return build_table(model, pool, fm_answers, calibration, config.netadapt.grid_step, latency=latency)


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(path: Path, data: Dict[str, object]) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


@click.group(cls=EdgeFMGroup, invoke_without_command=True)
@click.option("--version", is_flag=True, help="Show version information")
@click.option("-v", "--verbose", count=True, help="Increase verbosity (use multiple times)")
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    help="Path to a TOML run configuration",
)
@click.option("--seed", type=int, help="Override app.seed")
@click.option("--out", type=click.Path(file_okay=False), help="Override output.directory")
@click.pass_context
def cli(
    ctx: Context,
    version: bool,
    verbose: int,
    config_file: Optional[str],
    seed: Optional[int],
    out: Optional[str],
):
    """EdgeFM - edge-cloud cooperative open-set inference at desk scale.

    A synthetic foundation model on a simulated cloud customizes a small edge
    model, and a runtime router switches between edge and cloud inference as
    the network changes.
    """
    setup_cli_logging(verbose)

    if version:
        click.echo(f"edgefm v{__version__}")
        ctx.exit()

    ctx.ensure_object(dict)
    ctx.obj.update({"config_file": config_file, "seed": seed, "out": out, "verbose": verbose})

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command()
@click.option(
    "--variant",
    "variants",
    multiple=True,
    type=click.Choice([v.value for v in Variant]),
    help="Variant to train (repeatable; default: customize.variants)",
)
@click.pass_context
def customize(ctx: Context, variants: Tuple[str, ...]):
    """Customize the small model with each loss variant and compare them."""
    with command_guard("customize"):
        config = load_config(ctx)
        out_dir = prepare_output(ctx, config, "customize")
        world = config.create_world()
        pool = config.create_pool(world)
        spec = selected_spec(config)
        dataset = training_set(config, world)
        knowledge = query_knowledge(world, pool, dataset)
        _, holdout = split_holdout(dataset)
        fm_holdout = fm_accuracy(world, pool, holdout) if holdout else float("nan")

        rows = []
        for name in variants or config.customize.variants:
            variant = Variant.parse(name)
            model, log = train(
                world,
                pool,
                dataset,
                config.get_train_config(),
                variant,
                arch_id=spec.arch_id,
                hidden_dim=spec.hidden_dim,
                knowledge=knowledge,
            )
            save_checkpoint(model, out_dir / f"{variant.value}.ckpt")
            log.write_csv(out_dir / f"{variant.value}_training.csv")
            rows.append(
                [
                    variant.value,
                    spec.arch_id,
                    len(dataset),
                    f"{log.records[-1].loss:.10g}",
                    f"{log.final_accuracy:.6f}",
                    f"{fm_holdout:.6f}",
                ]
            )
            click.echo(f"{variant.value:<12} holdout accuracy {log.final_accuracy:.4f} (FM {fm_holdout:.4f})")

        write_rows(
            out_dir / "comparison.csv",
            ["variant", "arch_id", "samples", "final_loss", "holdout_accuracy", "fm_holdout_accuracy"],
            rows,
        )
        click.echo(f"Artifacts written to {out_dir}")


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="Bandwidth trace CSV (overrides [trace])")
@click.pass_context
def simulate(ctx: Context, trace_path: Optional[str]):
    """Run the configured end-to-end scenario in virtual time."""
    with command_guard("simulate"):
        config = load_config(ctx)
        scenario = config.get_scenario(config.get_trace(trace_path))
        out_dir = prepare_output(ctx, config, "simulate")
        report = run_scenario(scenario)
        csv_path, json_path = report.write(out_dir)
        if config.output.write_audit_log:
            audit_path, decisions_path = report.write_decision_logs(out_dir)
            logger.info(f"Wrote routing audit to {audit_path} and threshold decisions to {decisions_path}")

        summary = report.summary()
        click.echo(
            f"{summary['emitted']} samples: edge={summary['edge']} cloud={summary['cloud']} "
            f"in_flight={summary['in_flight']}, thresholds={summary['thresholds_published']}"
        )
        click.echo(f"Report written to {csv_path} and {json_path}")
        violations = summary["violations"]
        if violations:
            raise InvariantViolationError(f"{len(violations)} invariant violation(s) during the run", violations)


@cli.command()
@click.pass_context
def table(ctx: Context):
    """Build the threshold-searching table for the customized model."""
    with command_guard("table"):
        config = load_config(ctx)
        out_dir = prepare_output(ctx, config, "table")
        built = threshold_table(config)
        path = built.write_csv(
            out_dir / "threshold_table.csv",
            bandwidth_bps=config.netadapt.reference_bandwidth_mbps * MBPS,
            latency=config.get_latency_model(),
        )
        r_ok, acc_ok = built.monotonicity()
        click.echo(f"{len(built)} rows, monotone_r={r_ok} monotone_acc={acc_ok}; written to {path}")
        if not (r_ok and acc_ok):
            raise InvariantViolationError(
                "Threshold table is not monotone",
                [f"monotone_r={r_ok}", f"monotone_acc={acc_ok}"],
            )


@cli.command("probe-replay")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="Bandwidth trace CSV (overrides [trace])")
@click.pass_context
def probe_replay(ctx: Context, trace_path: Optional[str]):
    """Replay a bandwidth trace through the estimator and threshold solver."""
    with command_guard("probe-replay"):
        config = load_config(ctx)
        trace = config.get_trace(trace_path)
        out_dir = prepare_output(ctx, config, "probe_replay")
        interval = config.netadapt.probe_interval
        probes = int(config.scenario.duration // interval)
        controller = AdaptationController(
            profile=config.get_profile(),
            latency=config.get_latency_model(),
            estimator=BandwidthEstimator(config.netadapt.beta),
            table=threshold_table(config),
            history_size=max(probes, 1),
        )
        for k in range(probes):
            t = k * interval
            controller.on_probe(t, trace.bandwidth_at(t))
        path = controller.write_csv(out_dir / "decisions.csv")
        published = sorted({d.thre for d in controller.decisions})
        click.echo(f"{probes} probes replayed, thresholds used {published}; written to {path}")


@cli.command("cloud-serve")
@click.option("--host", help="Bind address (default: live.host)")
@click.option("--port", type=int, help="Port (default: live.port; 0 picks a free one)")
@click.option("--max-connections", type=int, help="Edge connections to serve before exiting")
@click.pass_context
def cloud_serve(ctx: Context, host: Optional[str], port: Optional[int], max_connections: Optional[int]):
    """Serve the cloud node over TCP."""
    with command_guard("cloud-serve"):
        config = load_config(ctx)
        world = config.create_world()
        s = config.scenario
        cloud = CloudNode(
            world,
            config.create_pool(world),
            config.get_profile(),
            ModelPool(config.get_model_specs()),
            train_config=config.get_train_config(),
            variant=s.variant,
            min_upload=s.min_upload,
            calibration_size=config.netadapt.calibration_size,
            grid_step=config.netadapt.grid_step,
            latency=config.get_latency_model(),
        )
        server = CloudServer(cloud, host or config.live.host, config.live.port if port is None else port)
        click.echo(f"Cloud serving {cloud.spec.arch_id} customizations on {server.host}:{server.port}")
        server.serve(max_connections if max_connections is not None else config.live.max_connections)
        click.echo(f"Served {server.frames_served} frames, pushed {server.updates_pushed} updates")


@cli.command("edge-run")
@click.option("--host", help="Cloud address (default: live.host)")
@click.option("--port", type=int, help="Cloud port (default: live.port)")
@click.option("--samples", type=int, help="Samples to process (default: live.samples)")
@click.pass_context
def edge_run(ctx: Context, host: Optional[str], port: Optional[int], samples: Optional[int]):
    """Run the edge node against a live cloud server."""
    with command_guard("edge-run"):
        config = load_config(ctx)
        out_dir = prepare_output(ctx, config, "live")
        world = config.create_world()
        edge = EdgeNode(
            config.create_pool(world),
            config.get_profile(),
            config.get_latency_model(),
            config.netadapt.beta,
            config.scenario.upload_threshold,
        )
        stream = SampleStream(world, config.pool_class_names(), seed=config.app.seed)
        client = connect_edge(
            edge,
            host or config.live.host,
            config.live.port if port is None else port,
            probe_bytes=config.live.probe_bytes,
        )
        try:
            results = client.run(stream.take(samples or config.live.samples), config.live.probe_every)
        finally:
            client.sock.close()

        if config.output.write_audit_log:
            client.audit.write_csv(out_dir / "decisions.csv")
        summary = summarize(results)
        summary["model_updates"] = edge.model_version
        summary["final_thre"] = edge.thre
        write_json(out_dir / "summary.json", summary)
        click.echo(
            f"{summary['samples']} samples, edge fraction {summary.get('edge_fraction', 0.0):.3f}, "
            f"{edge.model_version} model update(s); written to {out_dir}"
        )


def main():
    """Main entry point for the CLI."""
    cli(prog_name="edgefm")


if __name__ == "__main__":
    main()
