"""Command line entry point: `paralat run` and `paralat plotdata`."""

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import pandas as pd

from analyzer import ResultAnalyzer
from config import EXPERIMENT_KINDS, ExperimentConfig, load_config
from experiments import EXPERIMENTS, ExperimentResult
from utils import ArgumentError, ConfigurationError, ParalatError, configure_logging, file_sha256, parse_seeds


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def cell_mapper(threads: int):
    """Order-preserving map over experiment cells; a thread pool when threads > 1."""
    if threads <= 1:
        return lambda fn, cells: [fn(c) for c in cells]

    def pooled(fn, cells):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, cells))

    return pooled


def _stamp(df: pd.DataFrame, cfg: ExperimentConfig) -> pd.DataFrame:
    df = df.copy()
    df.insert(0, "config_hash", cfg.digest)
    df.insert(0, "experiment", cfg.kind)
    return df


def write_results(cfg: ExperimentConfig, result: ExperimentResult, out_dir: Path) -> Path:
    """Tables, NDJSON records, the validated config and MANIFEST.json listing every artifact."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = list(result.files)
    for name, df in sorted(result.tables.items()):
        path = out_dir / name
        _stamp(df, cfg).to_csv(path, index=False)
        paths.append(path)
    for name, records in sorted(result.records.items()):
        path = out_dir / name
        _stamp(pd.DataFrame.from_records(records), cfg).to_json(path, orient="records", lines=True)
        paths.append(path)
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(cfg.model_dump(mode="json", exclude={"output"}), indent=2, sort_keys=True))
    paths.append(config_path)

    artifacts = [
        {"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size, "sha256": file_sha256(p)}
        for p in sorted(set(paths))
    ]
    manifest = {"experiment": cfg.kind, "config_hash": cfg.digest, "seeds": cfg.seeds, "artifacts": artifacts}
    manifest_path = out_dir / "MANIFEST.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %d artifacts to %s", len(artifacts), out_dir)
    return manifest_path


@click.group()
def cli():
    """Discrete paracontrolled calculus experiments on Bravais lattices."""


@cli.command()
@click.argument("kind", required=False, type=click.Choice(EXPERIMENT_KINDS))
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="experiment TOML file")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="result directory")
@click.option("--seeds", default=None, help="comma separated seeds, overriding the config")
@click.option("--threads", default=1, show_default=True, envvar="PARALAT_THREADS", type=click.IntRange(min=1))
@click.option("--dry-run", is_flag=True, help="validate the config and stop")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def run(kind, config_path, out_dir, seeds, threads, dry_run, log_level):
    """Run the experiment described by --config."""
    configure_logging(log_level)
    try:
        cfg = load_config(config_path, parse_seeds(seeds))
        if kind is not None and kind != cfg.kind:
            raise ConfigurationError(f"command asks for {kind!r} but the config describes {cfg.kind!r}", path="kind")
    except ConfigurationError as err:
        click.echo(f"configuration error: {err}", err=True)
        sys.exit(EXIT_CONFIG)

    if dry_run:
        click.echo(f"{cfg.kind}: config valid (hash {cfg.digest})")
        sys.exit(EXIT_OK)

    out = Path(out_dir or cfg.output or Path("results") / f"{cfg.kind}-{cfg.digest}")
    logger.info("running %s with %d thread(s), seeds %s", cfg.kind, threads, cfg.seeds)
    try:
        result = EXPERIMENTS[cfg.kind](cfg, out, cell_mapper(threads))
        write_results(cfg, result, out)
    except ConfigurationError as err:
        click.echo(f"configuration error: {err}", err=True)
        sys.exit(EXIT_CONFIG)
    except (ParalatError, ArithmeticError) as err:
        logger.error("%s failed: %s", cfg.kind, err)
        sys.exit(EXIT_RUNTIME)

    if result.failures:
        for failure in result.failures:
            logger.error("check failed: %s", failure)
        sys.exit(EXIT_RUNTIME)
    click.echo(str(out))


@cli.command()
@click.argument("result_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("metric")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default=None, help="CSV file (default stdout)")
def plotdata(result_dir, metric, out_file):
    """Long-format CSV (experiment, eps, seed, t, metric, value) of METRIC."""
    if not (Path(result_dir) / "MANIFEST.json").exists():
        raise click.UsageError(f"{result_dir} has no MANIFEST.json")
    analyzer = ResultAnalyzer.from_result_dir(result_dir)
    try:
        table = analyzer.tidy(metric)
    except ArgumentError as err:
        raise click.UsageError(str(err)) from None
    if out_file:
        table.to_csv(out_file, index=False)
    else:
        click.echo(table.to_csv(index=False), nl=False)


def main():
    cli(prog_name="paralat")


if __name__ == "__main__":
    main()
