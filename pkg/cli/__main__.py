from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import typer

from cli import commands
from cli.config import load_run_config
from cli.utils import configure_logging
from m2at.errors import LabError

app = typer.Typer(add_completion=False, help="Masking-and-mixing adversarial training lab.")

ConfigOption = typer.Option(None, "--config", "-c", exists=True, dir_okay=False, readable=True, help="Flat dotted-key YAML run config")
OutputOption = typer.Option(None, "--output-dir", "-o", help="Directory for reports, checkpoints and metrics")
SeedOption = typer.Option(None, "--seed", help="Run seed")
SamplesOption = typer.Option(None, "--samples", help="Evaluate on a seeded subset of this size")
EpsilonOption = typer.Option(None, "--epsilon", help="l-inf budget in 1/255 units")
AlphaOption = typer.Option(None, "--alpha", help="PGD step size in 1/255 units")
RoundsOption = typer.Option(None, "--rounds", help="PGD rounds")


def _invoke(fn: Callable[[], List[str]]) -> None:
    """Run a command, print its report lines, map failures to exit codes."""
    try:
        lines = fn()
    except (LabError, FileNotFoundError) as e:
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(1)
    except KeyboardInterrupt:
        typer.echo("Interrupted; metrics flushed", err=True)
        raise typer.Exit(130)
    for line in lines:
        typer.echo(line)


def _config(config: Optional[Path], overrides: Dict[str, Any]):
    return load_run_config(config, overrides)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")) -> None:
    configure_logging(verbose)


@app.command("train")
def train(
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    seed: Optional[int] = SeedOption,
    method: Optional[str] = typer.Option(None, "--method", help="standard, pgd_at, pgd_ls, avmixup_g1, m2at or ablation"),
    masking: Optional[bool] = typer.Option(None, "--masking/--no-masking", help="Ablation flag"),
    mixing: Optional[bool] = typer.Option(None, "--mixing/--no-mixing", help="Ablation flag"),
    label_smoothing: Optional[bool] = typer.Option(None, "--label-smoothing/--no-label-smoothing", help="Ablation flag"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    epsilon: Optional[float] = EpsilonOption,
    alpha: Optional[float] = AlphaOption,
    rounds: Optional[int] = RoundsOption,
    arch: Optional[str] = typer.Option(None, "--arch", help="linear, mlp, small-cnn or mini-wrn"),
    data_source: Optional[str] = typer.Option(None, "--data", help="synth or cifar10"),
    data_root: Optional[str] = typer.Option(None, "--data-root", help="CIFAR-10 directory (else M2AT_DATA_ROOT)"),
    train_samples: Optional[int] = typer.Option(None, "--train-samples"),
    no_progress: bool = typer.Option(False, "--no-progress", help="Hide progress bars"),
) -> None:
    """Train a model; writes run_config.yaml, metrics.jsonl, final.ckpt and best.ckpt."""
    overrides = {
        "run.output_dir": output_dir,
        "run.seed": seed,
        "run.progress": False if no_progress else None,
        "train.method": method,
        "train.masking": masking,
        "train.mixing": mixing,
        "train.label_smoothing": label_smoothing,
        "train.epochs": epochs,
        "train.batch_size": batch_size,
        "train.lr": lr,
        "attack.epsilon": epsilon,
        "attack.alpha": alpha,
        "attack.rounds": rounds,
        "model.arch": arch,
        "data.source": data_source,
        "data.root": data_root,
        "data.train_samples": train_samples,
    }
    _invoke(lambda: commands.print_train_report(commands.train(_config(config, overrides))))


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Argument(..., dir_okay=False, help="Checkpoint to evaluate"),
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    seed: Optional[int] = SeedOption,
    samples: Optional[int] = SamplesOption,
    epsilon: Optional[float] = EpsilonOption,
    alpha: Optional[float] = AlphaOption,
    name: str = typer.Option("eval", "--name", help="Report file stem"),
    parquet: Optional[bool] = typer.Option(None, "--parquet/--no-parquet"),
) -> None:
    """Clean, FGSM, PGD-10, PGD-20 and CW-20 accuracy."""
    overrides = {
        "run.output_dir": output_dir,
        "run.seed": seed,
        "eval.samples": samples,
        "eval.parquet": parquet,
        "attack.epsilon": epsilon,
        "attack.alpha": alpha,
    }
    _invoke(lambda: commands.print_eval_report(commands.evaluate(_config(config, overrides), checkpoint, name)))


@app.command("attack")
def attack(
    checkpoint: Path = typer.Argument(..., dir_okay=False),
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    seed: Optional[int] = SeedOption,
    count: int = typer.Option(16, "--count", help="Number of samples to attack"),
    method: Optional[str] = typer.Option(None, "--method", help="fgsm or pgd"),
    loss: Optional[str] = typer.Option(None, "--loss", help="cross_entropy or margin"),
    epsilon: Optional[float] = EpsilonOption,
    alpha: Optional[float] = AlphaOption,
    rounds: Optional[int] = RoundsOption,
) -> None:
    """Attack one batch and dump clean/adversarial arrays for inspection."""
    overrides = {
        "run.output_dir": output_dir,
        "run.seed": seed,
        "attack.method": method,
        "attack.loss": loss,
        "attack.epsilon": epsilon,
        "attack.alpha": alpha,
        "attack.rounds": rounds,
    }
    _invoke(lambda: commands.print_attack_report(commands.attack(_config(config, overrides), checkpoint, count)))


@app.command("sweep")
def sweep(
    checkpoints: List[Path] = typer.Argument(..., dir_okay=False),
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    seed: Optional[int] = SeedOption,
    samples: Optional[int] = SamplesOption,
    names: Optional[List[str]] = typer.Option(None, "--name", help="Series name per checkpoint"),
    budget: Optional[List[float]] = typer.Option(None, "--budget", help="Budget in 1/255 units (repeatable)"),
    step_size: Optional[List[float]] = typer.Option(None, "--step-size", help="Step size in 1/255 units (repeatable)"),
) -> None:
    """Accuracy over epsilon budgets per alpha panel; CSV, JSONL, SVG and Vega-Lite output."""
    overrides = {
        "run.output_dir": output_dir,
        "run.seed": seed,
        "eval.samples": samples,
        "sweep.budgets": budget or None,
        "sweep.step_sizes": step_size or None,
    }
    _invoke(lambda: commands.print_sweep_report(commands.sweep(_config(config, overrides), checkpoints, names)))


@app.command("transfer")
def transfer(
    checkpoints: List[Path] = typer.Argument(..., dir_okay=False),
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    seed: Optional[int] = SeedOption,
    samples: Optional[int] = SamplesOption,
    names: Optional[List[str]] = typer.Option(None, "--name", help="Model name per checkpoint"),
    rounds: Optional[int] = typer.Option(None, "--rounds", help="PGD rounds for the transfer attack"),
) -> None:
    """Black-box transfer matrix: rows defend, columns attack."""
    overrides = {
        "run.output_dir": output_dir,
        "run.seed": seed,
        "eval.samples": samples,
        "eval.transfer_rounds": rounds,
    }
    _invoke(lambda: commands.print_transfer_report(commands.transfer(_config(config, overrides), checkpoints, names)))


@app.command("curves")
def curves(
    metrics_paths: List[Path] = typer.Argument(..., dir_okay=False, metavar="METRICS"),
    config: Optional[Path] = ConfigOption,
    output_dir: Optional[str] = OutputOption,
    names: Optional[List[str]] = typer.Option(None, "--name", help="Run name per metrics file"),
) -> None:
    """Held-out accuracy per epoch from metrics.jsonl logs; CSV, JSONL, SVG and Vega-Lite output."""
    overrides = {"run.output_dir": output_dir}
    _invoke(lambda: commands.print_curves_report(commands.curves(_config(config, overrides), metrics_paths, names)))


@app.command("gradcheck")
def gradcheck(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    arch: Optional[str] = typer.Option(None, "--arch"),
    tolerance: Optional[float] = typer.Option(None, "--tolerance"),
    max_entries: Optional[int] = typer.Option(None, "--max-entries", help="Coordinates checked per parameter"),
) -> None:
    """Compare backward against central differences in 64-bit mode."""
    overrides = {
        "run.seed": seed,
        "gradcheck.arch": arch,
        "gradcheck.tolerance": tolerance,
        "gradcheck.max_entries": max_entries,
    }
    outcome: Dict[str, bool] = {}

    def run() -> List[str]:
        report = commands.gradcheck(_config(config, overrides))
        outcome["passed"] = report.passed
        return commands.print_gradcheck_report(report)

    _invoke(run)
    if not outcome.get("passed", False):
        raise typer.Exit(1)


if __name__ == "__main__":
    app()
