import json
import logging
from pathlib import Path
from typing import Optional

import typer

from evifuse.config import load_config
from evifuse.errors import EvifuseError
from evifuse.pipeline import STAGES, run_stage
from evifuse.records import write_json

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

app = typer.Typer(help="Multi-evidence pseudo-label fusion.", no_args_is_help=True)

HELP = {
    "anchors": "Generate sliding anchor windows for every image.",
    "synth": "Generate a synthetic dataset with scored proposals and attention.",
    "heatmap": "Accumulate scored proposals into normalized object heatmaps.",
    "fuse": "Fuse heatmaps with global attention into object instances.",
    "cluster": "Remove instance outliers by per-class density clustering.",
    "relabel": "Discard instances the instance classifier disagrees with.",
    "pixels": "Build probability maps and pixel labels with uncertainty.",
    "harvest": "Harvest boxes from the pixel label maps.",
    "eval": "Evaluate pseudo-labels against ground truth.",
    "all": "Run heatmap through harvest, then eval when ground truth exists.",
}


def error_record(stage: str, error: Exception) -> dict:
    """Map an exception to the machine-readable error record and exit code."""
    if isinstance(error, EvifuseError):
        return error.to_record(stage)
    return {
        "schema": "error",
        "stage": stage,
        "type": type(error).__name__,
        "message": str(error),
        "path": str(error.filename) if getattr(error, "filename", None) else None,
        "exit_code": 2,
    }


def run(
    stage: str,
    config: Optional[Path],
    in_dir: Optional[Path],
    out_dir: Path,
    seed: Optional[int],
    timings: bool,
    verbose: bool,
) -> None:
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        cfg = load_config(config).with_seed(seed)
        run_stage(stage, cfg, in_dir, out_dir, timings=timings)
    except (EvifuseError, OSError) as e:
        record = error_record(stage, e)
        logger.error(f"Stage {stage} failed: {record['message']}")
        try:
            write_json(out_dir / "error.json", record)
        except OSError:
            logger.warning(f"Could not write {out_dir / 'error.json'}")
        typer.echo(json.dumps(record), err=True)
        raise typer.Exit(code=record["exit_code"])


def _register(stage: str) -> None:
    def command(
        config: Optional[Path] = typer.Option(
            None,
            "--config", "-c",
            file_okay=True,
            dir_okay=False,
            help="Path to a JSON configuration document.",
        ),
        in_dir: Optional[Path] = typer.Option(
            None,
            "--in", "-i",
            file_okay=False,
            dir_okay=True,
            help="Directory holding the stage inputs.",
        ),
        out_dir: Path = typer.Option(
            ...,
            "--out", "-o",
            file_okay=False,
            dir_okay=True,
            help="Directory receiving outputs, searched for inputs first.",
        ),
        seed: Optional[int] = typer.Option(
            None, "--seed", help="Override the configured seed."
        ),
        timings: bool = typer.Option(
            False, "--timings", help="Record wall-clock seconds in report.json."
        ),
        verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
    ) -> None:
        run(stage, config, in_dir, out_dir, seed, timings, verbose)

    command.__doc__ = HELP[stage]
    app.command(name=stage)(command)


for _stage in STAGES:
    _register(_stage)


if __name__ == "__main__":
    app()
