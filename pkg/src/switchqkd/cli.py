"""Command-line entry point: ``switchqkd run|serve|validate|report``."""

from __future__ import annotations

import dataclasses
import logging
import signal
import sys
import threading
from pathlib import Path

import click

from .consumers import InvariantViolation
from .events import read_log
from .report import emit_report, format_summary
from .scenario import ScenarioError, bundled_scenarios, load_scenario
from .service import EXIT_INTERRUPTED, EXIT_INVARIANT, EXIT_VALIDATION, StartupError, serve as serve_network
from .simulation import run_simulation


def _load(scenario: str, seed: int | None):
    try:
        config = load_scenario(scenario)
    except ScenarioError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Switched QKD network simulator with PUF-based link authentication."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.argument("scenario")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for events.jsonl and the CSV bundle.")
def run(scenario: str, seed: int | None, out_dir: str | None) -> None:
    """Run SCENARIO (file path or bundled name) in simulation mode."""
    config = _load(scenario, seed)
    try:
        log, report = run_simulation(config)
    except InvariantViolation as exc:
        click.echo(f"invariant violated: {exc}", err=True)
        sys.exit(EXIT_INVARIANT)
    except KeyboardInterrupt:
        sys.exit(EXIT_INTERRUPTED)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log.write(out / "events.jsonl")
        report = emit_report(log.records, out, config)
    click.echo(format_summary(report), nl=False)


@main.command()
@click.argument("scenario")
@click.option("--time-scale", type=float, default=1.0, show_default=True,
              help="Virtual seconds per wall-clock second.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--base-port", type=int, default=8014, show_default=True,
              help="First KME port; KMEs get consecutive ports. 0 picks free ports.")
@click.option("--duration", type=float, default=None, help="Virtual seconds to run (default: scenario).")
@click.option("--consumers", type=click.Choice(["http", "local", "none"]), default="http", show_default=True,
              help="How the scenario's own consumers reach the KMEs.")
def serve(scenario, time_scale, out_dir, seed, host, base_port, duration, consumers) -> None:
    """Serve SCENARIO: ETSI 014 endpoints per KME plus the controller on the wall clock."""
    config = _load(scenario, seed)
    if time_scale <= 0:
        click.echo("error: --time-scale must be positive", err=True)
        sys.exit(EXIT_VALIDATION)
    stop = threading.Event()

    def _stop(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)

    def _ready(service):
        for kme, url in sorted(service.urls.items()):
            click.echo(f"{kme}: {url}")
        sys.stdout.flush()

    try:
        code = serve_network(config, time_scale, out_dir, host, base_port, duration, consumers, stop, _ready)
    except StartupError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    sys.exit(code)


@main.command()
@click.argument("scenario")
def validate(scenario: str) -> None:
    """Check SCENARIO and print its resolved parameters."""
    config = _load(scenario, None)
    click.echo(f"{config.name}: OK ({len(config.links)} links, {len(config.consumers)} consumers, seed {config.seed})")
    pol = config.policy
    click.echo(
        f"  thresholds bar {pol.bar_threshold} B / cross {pol.cross_threshold} B, "
        f"poll {pol.poll_interval:g} s, dwell {pol.min_dwell:g} s, aggregate {pol.aggregate}"
    )
    phases = ", ".join(f"{k} {v:g}" for k, v in config.switch_timing.phases().items())
    click.echo(f"  switch {config.switch_timing.total_duration:g} s ({phases})")


@main.command()
@click.argument("logfile", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for the CSV bundle (default: next to the log).")
def report(logfile: str, out_dir: str | None) -> None:
    """Rebuild the report and CSV bundle from an event LOGFILE."""
    records = read_log(logfile)
    out = Path(out_dir) if out_dir else Path(logfile).parent
    rep = emit_report(records, out)
    click.echo(format_summary(rep), nl=False)


@main.command(name="scenarios")
def list_scenarios() -> None:
    """List bundled scenarios."""
    for name in bundled_scenarios():
        click.echo(name)


if __name__ == "__main__":
    main()
