#!/usr/bin/env python3
"""stiv command line.

    python -m src.main fit --data wages.csv --outcome y --regressors x1,x2 --instruments z1,z2,x2 --exogenous x2
    python -m src.main simulate --profile table3 --reps 200

Exit status: 0 on success, 1 on user error, 2 on solver failure.
"""
import sys
from typing import Any, Callable, Dict, List, Optional

import click

from src.cli.commands import run
from src.cli.run_config import parse_config
from src.stiv.exceptions import SolverFailure, UserInputError
from src.utils.logging import app_logger, kv

EXIT_OK, EXIT_USER, EXIT_SOLVER = 0, 1, 2


def _split(ctx, param, value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [item.strip() for item in value.split(",") if item.strip()]


def _floats(ctx, param, value: Optional[str]) -> Optional[List[float]]:
    items = _split(ctx, param, value)
    try:
        return None if items is None else [float(v) for v in items]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def _ints(ctx, param, value: Optional[str]) -> Optional[List[int]]:
    items = _split(ctx, param, value)
    try:
        return None if items is None else [int(v) for v in items]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def _groups(ctx, param, value) -> Optional[List[List[str]]]:
    if not value:
        return None
    return [_split(ctx, param, v) for v in value]


DATA_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run configuration"),
    click.option("--data", help="input CSV"),
    click.option("--outcome"),
    click.option("--regressors", callback=_split, help="comma-separated columns"),
    click.option("--instruments", callback=_split, help="comma-separated columns"),
    click.option("--zbar", callback=_split, help="suspect instruments"),
    click.option("--constant", help="constant instrument column"),
    click.option("--exogenous", callback=_split, help="regressors repeated among the instruments"),
    click.option("--estimator", type=click.Choice(["stiv", "stiv_r", "sqrt_lasso"])),
    click.option("--c", type=float),
    click.option("--c-grid", callback=_floats),
    click.option("--r", type=float, help="override the scenario rule"),
    click.option("--s", type=int, help="sparsity certificate"),
    click.option("--s-list", callback=_ints),
    click.option("--I", "I", callback=_split, help="cone instruments besides the constant"),
    click.option("--dx-mode", type=click.Choice(["rms", "maxabs"])),
    click.option("--cone", type=click.Choice(["standard", "enlarged"])),
    click.option("--J0", "J0", multiple=True, callback=_groups, help="group of regressors, repeatable"),
    click.option("--p", type=float),
    click.option("--heavy-tail/--no-heavy-tail", default=None),
    click.option("--plugin/--no-plugin", default=None),
    click.option("--scenario", type=click.IntRange(1, 5)),
    click.option("--alpha", type=float),
    click.option("--delta", type=float),
    click.option("--c4", type=float),
    click.option("--simplified-c4", type=float, help="fourth-moment bound behind the simplified scenario-5 rule"),
    click.option("--two-stage-r/--no-two-stage-r", default=None),
    click.option("--error-dist", type=click.Choice(["normal", "student_t", "laplace", "rademacher"])),
    click.option("--B", "B", type=int),
    click.option("--k-end"),
    click.option("--c-rf", type=float),
    click.option("--s-rf", type=int),
    click.option("--c-nv", type=float),
    click.option("--s1", type=int),
    click.option("--b-rule", type=click.Choice(["certificate", "sparsity_scaled"])),
    click.option("--output-dir"),
    click.option("--seed", type=int),
    click.option("--max-workers", type=int),
]


def data_options(func: Callable) -> Callable:
    for option in reversed(DATA_OPTIONS):
        func = option(func)
    return func


def execute(command: str, config_path: Optional[str], flags: Dict[str, Any]) -> int:
    """Parse, run and map errors onto exit codes."""
    try:
        cfg = parse_config(config_path, {"command": command, **flags})
        run(cfg)
    except UserInputError as exc:
        app_logger.error(kv(command=command, error=type(exc).__name__, detail=str(exc)))
        click.echo(f"error: {exc}", err=True)
        return EXIT_USER
    except SolverFailure as exc:
        app_logger.error(kv(command=command, error="SolverFailure", dump=exc.dump_path, detail=str(exc)))
        click.echo(f"solver failure: {exc}", err=True)
        return EXIT_SOLVER
    return EXIT_OK


@click.group(name="stiv")
def cli():
    """Self-tuning instrumental variables: estimation, sensitivities and confidence sets."""


def _register(name: str, help_text: str) -> None:
    @data_options
    @click.pass_context
    def command(ctx, config_path, **flags):
        ctx.exit(execute(name, config_path, flags))

    command.__doc__ = help_text
    cli.command(name=name)(command)


_register("fit", "Fit STIV, STIV-R or the square-root Lasso.")
_register("sens", "Sensitivity certificates for a fitted Psi.")
_register("ci", "Confidence intervals and group bounds.")
_register("select", "Support and sign selection by thresholding.")
_register("twostage", "Two-stage STIV with an estimated projection instrument.")
_register("nv", "Detect non-valid instruments.")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--profile", help="table1, first_stage, table3, table5 or table7")
@click.option("--n", type=int)
@click.option("--reps", type=int)
@click.option("--seed", type=int)
@click.option("--c", type=float)
@click.option("--s", type=int)
@click.option("--alpha", type=float)
@click.option("--output-dir")
@click.option("--max-workers", type=int)
@click.pass_context
def simulate(ctx, config_path, **flags):
    """Reproduce a table profile of the simulation study."""
    ctx.exit(execute("simulate", config_path, flags))


def main(argv: Optional[List[str]] = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="stiv", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USER
    except click.exceptions.Abort:
        return EXIT_USER
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
