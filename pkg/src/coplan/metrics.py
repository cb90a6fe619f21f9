"""Fluency and perception-timing analytics over collaboration event logs.

The timeline model splits each agent's session into active and idle
spans.  A robot counts as active only while grasping, releasing, or
moving; perception and waiting are idle time.  A human counts as active
during any action, minus spans the operator explicitly declared idle.
The four fluency percentages come from sweeping these interval sets:
idle fractions per agent, concurrent activity (both active), and
functional delay (both idle).  By inclusion-exclusion they satisfy

    concurrent_activity = 100 - human_idle - robot_idle + functional_delay

and the module computes every term independently, so that identity is a
checked property rather than a bookkeeping artifact.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from statistics import fmean, pstdev

from .domain import DomainSource, load_bundled, parse
from .sim import EventLog
from .state import AgentKind

Span = tuple[float, float]

ROBOT_ACTIVE_TEMPLATES = frozenset({"grasp", "release", "move"})
HUMAN_ACTIVE_TEMPLATES = frozenset({"grasp", "release", "move", "manipulate"})

FLUENCY_CSV_HEADER = (
    "human_idle_pct",
    "robot_idle_pct",
    "functional_delay_pct",
    "concurrent_activity_pct",
)
TIMING_CSV_HEADER = ("kind", "count", "mean_s", "min_s", "max_s", "std_s")

METRICS_SCHEMA = "coplan.metrics"


class MetricsError(ValueError):
    """A log or report that cannot be analyzed."""


@dataclass(frozen=True)
class Timeline:
    """Disjoint per-agent activity intervals within one session span."""

    span: Span
    robot: str
    human: str | None
    active: dict[str, tuple[Span, ...]]

    @property
    def duration(self) -> float:
        return self.span[1] - self.span[0]


@dataclass(frozen=True)
class FluencyReport:
    human_idle: float
    robot_idle: float
    functional_delay: float
    concurrent_activity: float

    def as_row(self) -> tuple[float, float, float, float]:
        return (
            self.human_idle,
            self.robot_idle,
            self.functional_delay,
            self.concurrent_activity,
        )


@dataclass(frozen=True)
class PerceiveStats:
    count: int
    mean: float
    min: float
    max: float
    std: float


@dataclass(frozen=True)
class PerceptionTimingReport:
    """Duration statistics per perceive kind; absent kinds were never run."""

    kinds: dict[str, PerceiveStats]

    def count(self, kind: str) -> int:
        stats = self.kinds.get(kind)
        return stats.count if stats else 0


# -- interval arithmetic ----------------------------------------------


def _merge(spans: list[Span]) -> tuple[Span, ...]:
    out: list[Span] = []
    for start, end in sorted(spans):
        if out and start <= out[-1][1]:
            prev = out[-1]
            out[-1] = (prev[0], max(prev[1], end))
        else:
            out.append((start, end))
    return tuple(out)


def _total(spans: tuple[Span, ...]) -> float:
    return sum(end - start for start, end in spans)


def _overlap(a: tuple[Span, ...], b: tuple[Span, ...]) -> tuple[Span, ...]:
    out: list[Span] = []
    i = j = 0
    while i < len(a) and j < len(b):
        start = max(a[i][0], b[j][0])
        end = min(a[i][1], b[j][1])
        if start < end:
            out.append((start, end))
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return tuple(out)


def _complement(spans: tuple[Span, ...], span: Span) -> tuple[Span, ...]:
    out: list[Span] = []
    cursor = span[0]
    for start, end in spans:
        if start > cursor:
            out.append((cursor, start))
        cursor = max(cursor, end)
    if cursor < span[1]:
        out.append((cursor, span[1]))
    return tuple(out)


# -- timeline construction --------------------------------------------


def _session_domain(log: EventLog):
    record = log.scenario["domain"]
    if "bundled" in record:
        return load_bundled(record["bundled"])
    return parse(DomainSource(record["source"], origin="<eventlog>"))


def build_timeline(log: EventLog) -> Timeline:
    """Extract per-agent activity intervals from a session log."""
    domain = _session_domain(log)
    decl = domain.declarations
    robot = next(a.name for a in decl.agents if a.kind is AgentKind.ROBOT)
    human = next(
        (a.name for a in decl.agents if a.kind is AgentKind.HUMAN), None
    )
    if not log.events:
        return Timeline((0.0, 0.0), robot, human, {robot: ()})

    span = (log.events[0]["t"], log.events[-1]["t"])
    open_action: dict[str, tuple[float, str]] = {}
    raw: dict[str, list[Span]] = {robot: []}
    if human is not None:
        raw[human] = []
    idle_spans: list[Span] = []
    idle_since: float | None = None

    for event in log.events:
        kind = event["kind"]
        agent = event["agent"]
        t = event["t"]
        if kind == "action_start":
            if agent in open_action:
                raise MetricsError(
                    f"agent {agent!r} starts an action at t={t} while busy"
                )
            open_action[agent] = (t, event["payload"]["action"]["template"])
        elif kind == "action_end":
            if agent not in open_action:
                raise MetricsError(f"unmatched action_end at t={t} for {agent!r}")
            start, template = open_action.pop(agent)
            if agent == robot and template in ROBOT_ACTIVE_TEMPLATES:
                raw[robot].append((start, t))
            elif agent == human and template in HUMAN_ACTIVE_TEMPLATES:
                raw[human].append((start, t))
        elif kind == "human_event" and event["payload"].get("event") == "idle_state":
            if event["payload"]["idle"]:
                if idle_since is None:
                    idle_since = t
            elif idle_since is not None:
                idle_spans.append((idle_since, t))
                idle_since = None
    if open_action:
        names = ", ".join(sorted(open_action))
        raise MetricsError(f"log ends with unmatched action_start for {names}")
    if idle_since is not None:
        idle_spans.append((idle_since, span[1]))

    active = {robot: _merge(raw[robot])}
    if human is not None:
        spans = _merge(raw[human])
        if idle_spans:
            # operator-declared idle overrides whatever the arm was doing
            keep = _complement(_merge(idle_spans), span)
            spans = _overlap(spans, keep)
        active[human] = spans
    return Timeline(span, robot, human, active)


# -- fluency -----------------------------------------------------------


def fluency(timeline: Timeline) -> FluencyReport:
    duration = timeline.duration
    if duration <= 0.0:
        raise MetricsError("session span is empty; no time base for percentages")
    if timeline.human is None:
        raise MetricsError("fluency needs a human teammate in the domain")
    robot_active = timeline.active[timeline.robot]
    human_active = timeline.active[timeline.human]
    robot_idle = _complement(robot_active, timeline.span)
    human_idle = _complement(human_active, timeline.span)
    scale = 100.0 / duration
    return FluencyReport(
        human_idle=_total(human_idle) * scale,
        robot_idle=_total(robot_idle) * scale,
        functional_delay=_total(_overlap(robot_idle, human_idle)) * scale,
        concurrent_activity=_total(_overlap(robot_active, human_active)) * scale,
    )


def mean_fluency(reports: list[FluencyReport]) -> FluencyReport:
    """Arithmetic mean per metric; the partition identity survives averaging."""
    if not reports:
        raise MetricsError("no reports to average")
    return FluencyReport(
        human_idle=fmean(r.human_idle for r in reports),
        robot_idle=fmean(r.robot_idle for r in reports),
        functional_delay=fmean(r.functional_delay for r in reports),
        concurrent_activity=fmean(r.concurrent_activity for r in reports),
    )


# -- perception timing -------------------------------------------------


def perception_timing(log: EventLog) -> PerceptionTimingReport:
    durations: dict[str, list[float]] = {}
    for event in log.of_kind("perceive_result"):
        payload = event["payload"]
        durations.setdefault(payload["kind"], []).append(payload["duration"])
    kinds = {
        kind: PerceiveStats(
            count=len(values),
            mean=fmean(values),
            min=min(values),
            max=max(values),
            std=pstdev(values) if len(values) > 1 else 0.0,
        )
        for kind, values in sorted(durations.items())
    }
    return PerceptionTimingReport(kinds)


# -- export ------------------------------------------------------------


def session_report(log: EventLog) -> dict:
    """One structured record combining both analyses, for CLI and gateway."""
    report = fluency(build_timeline(log))
    timing = perception_timing(log)
    return {
        "schema": METRICS_SCHEMA,
        "duration_s": log.events[-1]["t"] if log.events else 0.0,
        "goal_reached": log.goal_reached,
        "fluency": _fluency_record(report),
        "perception": _timing_record(timing),
    }


def _fluency_record(report: FluencyReport) -> dict:
    return {
        "human_idle_pct": report.human_idle,
        "robot_idle_pct": report.robot_idle,
        "functional_delay_pct": report.functional_delay,
        "concurrent_activity_pct": report.concurrent_activity,
    }


def _timing_record(report: PerceptionTimingReport) -> dict:
    return {
        kind: {
            "count": stats.count,
            "mean_s": stats.mean,
            "min_s": stats.min,
            "max_s": stats.max,
            "std_s": stats.std,
        }
        for kind, stats in report.kinds.items()
    }


def export(report: FluencyReport | PerceptionTimingReport, format: str) -> bytes:
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        if isinstance(report, FluencyReport):
            writer.writerow(FLUENCY_CSV_HEADER)
            writer.writerow([repr(v) for v in report.as_row()])
        elif isinstance(report, PerceptionTimingReport):
            writer.writerow(TIMING_CSV_HEADER)
            for kind, stats in sorted(report.kinds.items()):
                writer.writerow(
                    [
                        kind,
                        stats.count,
                        repr(stats.mean),
                        repr(stats.min),
                        repr(stats.max),
                        repr(stats.std),
                    ]
                )
        else:
            raise MetricsError(f"cannot export {type(report).__name__}")
        return buffer.getvalue().encode()
    if format == "structured-record":
        if isinstance(report, FluencyReport):
            record = {
                "schema": METRICS_SCHEMA,
                "report": "fluency",
                **_fluency_record(report),
            }
        elif isinstance(report, PerceptionTimingReport):
            record = {
                "schema": METRICS_SCHEMA,
                "report": "perception_timing",
                "kinds": _timing_record(report),
            }
        else:
            raise MetricsError(f"cannot export {type(report).__name__}")
        return json.dumps(record, sort_keys=True).encode()
    raise MetricsError(f"unknown export format {format!r}")


def parse_export(data: bytes, format: str) -> FluencyReport | PerceptionTimingReport:
    """Inverse of export; recovers values exactly (repr round-trip)."""
    text = data.decode()
    if format == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise MetricsError("empty csv")
        header = tuple(rows[0])
        if header == FLUENCY_CSV_HEADER:
            if len(rows) != 2:
                raise MetricsError("fluency csv needs exactly one data row")
            h, r, f, c = (float(v) for v in rows[1])
            return FluencyReport(h, r, f, c)
        if header == TIMING_CSV_HEADER:
            kinds = {
                row[0]: PerceiveStats(
                    count=int(row[1]),
                    mean=float(row[2]),
                    min=float(row[3]),
                    max=float(row[4]),
                    std=float(row[5]),
                )
                for row in rows[1:]
            }
            return PerceptionTimingReport(kinds)
        raise MetricsError(f"unrecognized csv header {header!r}")
    if format == "structured-record":
        record = json.loads(text)
        if record.get("schema") != METRICS_SCHEMA:
            raise MetricsError("not a metrics record")
        if record.get("report") == "fluency":
            return FluencyReport(
                record["human_idle_pct"],
                record["robot_idle_pct"],
                record["functional_delay_pct"],
                record["concurrent_activity_pct"],
            )
        if record.get("report") == "perception_timing":
            kinds = {
                kind: PerceiveStats(
                    count=entry["count"],
                    mean=entry["mean_s"],
                    min=entry["min_s"],
                    max=entry["max_s"],
                    std=entry["std_s"],
                )
                for kind, entry in record["kinds"].items()
            }
            return PerceptionTimingReport(kinds)
        raise MetricsError("unrecognized metrics record")
    raise MetricsError(f"unknown export format {format!r}")
