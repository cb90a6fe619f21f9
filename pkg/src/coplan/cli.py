"""Command-line front end: plan, simulate, analyze, and serve sessions.

Exit codes: 0 on success, 1 for domain or runtime failures, 2 for usage
errors.  Stdout of plan and metrics is line-stable for identical inputs;
wall-clock timing goes to stderr so golden files stay reproducible.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from .actions import action_record
from .domain import BUNDLED_DOMAINS, DomainSource, ParseError
from .metrics import export as export_report
from .metrics import build_timeline, fluency, perception_timing, session_report
from .planner import PlanningError, TreeNode, explain
from .planner import plan as build_plan
from .sim import (
    EventLog,
    HumanPolicy,
    PolicyKind,
    Scenario,
    SessionError,
    load_domain,
    run,
)
from .state import new_state

_LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

# simulate accepts every scripted policy; interactive runs only under serve
_POLICY_PARAM = {
    "compliant": None,
    "independent_picker": "p_pick",
    "error_prone": "p_drop",
    "variable_speed": "scale",
}


def _domain_spec(value: str) -> str | DomainSource:
    """Bundled name, or a path to a domain definition file."""
    if value in BUNDLED_DOMAINS:
        return value
    path = Path(value)
    if path.suffix == ".htn" or path.exists():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise click.ClickException(f"cannot read {value}: {exc.strerror}")
        return DomainSource(text, origin=str(path))
    names = ", ".join(sorted(BUNDLED_DOMAINS))
    raise click.ClickException(f"unknown domain {value!r} (bundled: {names})")


def _parse_policy(text: str) -> HumanPolicy:
    name, _, raw = text.partition(":")
    if name not in _POLICY_PARAM:
        names = ", ".join(sorted(_POLICY_PARAM))
        raise click.BadParameter(f"unknown policy {name!r} (choose from {names})")
    param = _POLICY_PARAM[name]
    kwargs: dict[str, float] = {}
    if raw:
        if param is None:
            raise click.BadParameter(f"policy {name!r} takes no parameter")
        try:
            kwargs[param] = float(raw)
        except ValueError:
            raise click.BadParameter(f"bad {param} value {raw!r}")
    try:
        return HumanPolicy(PolicyKind(name), **kwargs)
    except ValueError as exc:
        raise click.BadParameter(str(exc))


def _tree_record(node: TreeNode) -> dict:
    rec: dict = {"task": node.task.format()}
    if node.method_label is not None:
        rec["method"] = node.method_label
    if node.action is not None:
        rec["action"] = action_record(node.action)
    if node.children:
        rec["children"] = [_tree_record(child) for child in node.children]
    return rec


@click.group()
def main() -> None:
    """Plan, simulate, and analyze human-robot collaborative assembly."""
    level = _LOG_LEVELS.get(os.environ.get("COPLAN_LOG_LEVEL", "error"))
    if level is None:
        level = logging.ERROR
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("plan")
@click.option(
    "--domain",
    "domain_arg",
    required=True,
    metavar="NAME|PATH",
    help="Bundled domain name or path to a .htn file.",
)
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Write the plan and its decomposition tree here as JSON.",
)
def plan_command(domain_arg: str, out_path: str | None) -> None:
    """Build the full assembly plan and print its length."""
    domain = load_domain(_domain_spec(domain_arg))
    state = new_state(domain.declarations)
    started = time.perf_counter()
    try:
        built = build_plan(domain, state)
    except PlanningError as exc:
        raise click.ClickException(str(exc))
    wall = time.perf_counter() - started
    click.echo(f"{len(built)} steps")
    click.echo(f"planned in {wall:.3f} s", err=True)
    if out_path is not None:
        doc = {
            "domain": domain.name,
            "steps": built.export(),
            "tree": _tree_record(explain(built)),
        }
        Path(out_path).write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


@main.command("simulate")
@click.option("--domain", "domain_arg", required=True, metavar="NAME|PATH")
@click.option("--seed", type=click.IntRange(0), default=0, show_default=True)
@click.option(
    "--policy",
    "policy_arg",
    default="compliant",
    show_default=True,
    metavar="NAME[:VALUE]",
    help="Scripted human policy; VALUE sets its parameter, e.g. "
    "independent_picker:0.5 or variable_speed:1.6.",
)
@click.option(
    "--log",
    "log_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Write the event log here (stdout when omitted).",
)
def simulate_command(
    domain_arg: str, seed: int, policy_arg: str, log_path: str | None
) -> None:
    """Run one scripted scenario to completion."""
    spec = _domain_spec(domain_arg)
    policy = _parse_policy(policy_arg)
    try:
        log = run(Scenario(domain=spec, seed=seed, policy=policy))
    except (SessionError, ParseError, ValueError) as exc:
        raise click.ClickException(str(exc))
    if log_path is None:
        click.echo(log.dump(), nl=False)
    else:
        log.write(log_path)
        goal = "reached" if log.goal_reached else "not reached"
        click.echo(f"{len(log.events)} events, goal {goal}")


@main.command("metrics")
@click.option(
    "--log",
    "log_path",
    required=True,
    type=click.Path(dir_okay=False),
    help="Event log produced by simulate.",
)
@click.option(
    "--csv",
    "csv_dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Directory for fluency.csv and perception.csv.",
)
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Write the combined structured report here.",
)
def metrics_command(log_path: str, csv_dir: str | None, out_path: str | None) -> None:
    """Compute fluency and perception timing reports from an event log."""
    try:
        text = Path(log_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise click.ClickException(f"cannot read {log_path}: {exc.strerror}")
    try:
        log = EventLog.parse(text)
        report = session_report(log)
        fluency_report = fluency(build_timeline(log))
        timing_report = perception_timing(log)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    for key, value in report["fluency"].items():
        click.echo(f"{key}={value!r}")
    for kind, stats in report["perception"].items():
        click.echo(f"{kind} count={stats['count']} mean_s={stats['mean_s']!r}")
    if csv_dir is not None:
        directory = Path(csv_dir)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "fluency.csv").write_bytes(export_report(fluency_report, "csv"))
        (directory / "perception.csv").write_bytes(export_report(timing_report, "csv"))
    if out_path is not None:
        Path(out_path).write_text(
            json.dumps(report, sort_keys=True) + "\n", encoding="utf-8"
        )


@main.command("serve")
@click.option("--domain", "domain_arg", required=True, metavar="NAME|PATH")
@click.option("--seed", type=click.IntRange(0), default=0, show_default=True)
@click.option("--port", type=click.IntRange(1, 65535), default=7321, show_default=True)
@click.option(
    "--speed",
    type=float,
    default=1.0,
    show_default=True,
    help="Virtual seconds advanced per wall-clock second.",
)
def serve_command(domain_arg: str, seed: int, port: int, speed: float) -> None:
    """Host one interactive session for the operator console."""
    if speed <= 0:
        raise click.BadParameter("--speed must be positive")
    # the gateway pulls in its web stack; keep that off the other subcommands
    from .gateway import serve

    spec = _domain_spec(domain_arg)
    scenario = Scenario(
        domain=spec, seed=seed, policy=HumanPolicy(PolicyKind.INTERACTIVE)
    )
    click.echo(f"interactive session on port {port}", err=True)
    serve(scenario, port=port, speed=speed)


if __name__ == "__main__":
    main()
