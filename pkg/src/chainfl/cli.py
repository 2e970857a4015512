"""Command-line entry point: ``chainfl run | validate-chain | replay-report | presets``."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import ExperimentConfig, load_config, load_preset, preset_names
from .errors import ChainFLError
from .ledger import check_chain, import_chain
from .orchestrator import run_experiment
from .reports import emit_reports


def _load(config: str | None, preset: str | None) -> ExperimentConfig:
    if config and preset:
        raise click.UsageError("use either --config or --preset, not both")
    if config:
        return load_config(config)
    if preset:
        return load_preset(preset)
    return ExperimentConfig()


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int):
    """Blockchain-verified federated learning simulator."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="YAML experiment file.")
@click.option("--preset", help="Name of a shipped preset (see `chainfl presets`).")
@click.option("--seed", type=click.IntRange(min=0), required=True)
@click.option("--mode", type=click.Choice(["bfmeta", "fedavg"]), required=True)
@click.option("--malicious-rate", type=click.FloatRange(0, 1, max_open=True), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--max-rounds", type=click.IntRange(min=1), help="Override the round cap.")
@click.option("--difficulty", type=click.IntRange(0, 64), help="Override PoW difficulty (bits).")
def run(config, preset, seed, mode, malicious_rate, out, max_rounds, difficulty):
    """Run one experiment and write CSV/JSON/chain reports to OUT."""
    try:
        cfg = _load(config, preset)
        exp = {"seed": seed, "mode": mode}
        if max_rounds is not None:
            exp["max_rounds"] = max_rounds
        cfg = cfg.with_overrides(
            experiment=exp,
            adversary={"malicious_rate": malicious_rate},
            ledger={"difficulty": difficulty} if difficulty is not None else {},
        )
        result = run_experiment(cfg)
        paths = emit_reports(result, out)
    except (ChainFLError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    status = "converged" if result.converged else "did not converge"
    click.echo(
        f"{mode} seed={seed} malicious={malicious_rate:g}: {status} after {len(result.rounds)} rounds, "
        f"final accuracy {result.final_accuracy:.4f}"
    )
    for kind, path in paths.items():
        click.echo(f"  {kind}: {path}")
    if not result.to_json()["chain"]["valid"]:
        sys.exit(1)


@main.command("validate-chain")
@click.argument("chain_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--difficulty", type=click.IntRange(0, 256), help="Minimum difficulty every block must meet.")
def validate_chain_cmd(chain_file, difficulty):
    """Audit an exported chain; exit status 1 if any invariant fails."""
    try:
        blocks, auth = import_chain(chain_file)
    except (ChainFLError, ValueError, KeyError) as exc:
        click.echo(f"INVALID: cannot parse {chain_file}: {exc}")
        sys.exit(1)
    if auth is None:
        click.echo("INVALID: export carries no authorization_list")
        sys.exit(1)
    check = check_chain(blocks, auth, difficulty)
    if not check.valid:
        click.echo(f"INVALID: {check.reason} at block {check.block_index}")
        sys.exit(1)
    n_records = sum(len(b.records) for b in blocks)
    click.echo(f"VALID: {len(blocks)} blocks, {n_records} records, head {blocks[-1].hash.hex()}")


@main.command("replay-report")
@click.option("--chain", "chain_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Resolved config written by `run` (config.yaml).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def replay_report(chain_file, config, out):
    """Re-run the experiment from CONFIG, check it reproduces CHAIN block for
    block, and write recomputed reports to OUT."""
    try:
        blocks, auth = import_chain(chain_file)
        if auth is None or not check_chain(blocks, auth):
            click.echo("INVALID: supplied chain does not validate")
            sys.exit(1)
        result = run_experiment(load_config(config))
    except (ChainFLError, ValueError, KeyError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    replayed = [b.hash for b in result.chain]
    supplied = [b.hash for b in blocks]
    if replayed != supplied:
        first = next((i for i, (a, b) in enumerate(zip(replayed, supplied)) if a != b), min(len(replayed), len(supplied)))
        click.echo(f"MISMATCH: replay diverges from supplied chain at block {first}")
        sys.exit(1)
    emit_reports(result, out)
    click.echo(f"REPRODUCED: {len(blocks)} blocks; reports written to {Path(out)}")


@main.command()
def presets():
    """List shipped preset configurations."""
    for name in preset_names():
        click.echo(name)


if __name__ == "__main__":
    main()
