"""Discrete-event execution of collaboration plans.

A Session advances a virtual clock over a heap of timed events.  The robot
works through its share of the current plan strictly serially; the human
side is driven either by a scripted policy or, in interactive mode, by
injected operator events.  Two interaction states are kept: the ground
truth that actions are applied to, and the robot's belief, which changes
only through the robot's own actions, perception results, and the local
sync that follows a failed dispatch.  Planning always runs on the belief.

Determinism: one seeded random stream per session.  Draws happen only at
fixed points of the (itself deterministic) event processing order: action
dispatch (duration), policy decisions (think pause, pick roll, drop roll,
pull latency), and perception result construction (location noise in
object declaration order, idle flips).  Identical scenarios therefore
produce byte-identical logs.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from heapq import heappop, heappush
from pathlib import Path

from .actions import (
    ActionTemplate,
    EDITS,
    PerceiveKind,
    PreconditionError,
    PrimitiveAction,
    Verdict,
    Violation,
    WaitCondition,
    action_from_record,
    action_record,
    apply,
    preconditions,
)
from .domain import DomainSource, load_bundled, parse
from .planner import Domain, Plan, PlanningError, plan as build_plan
from .state import (
    AgentKind,
    EntityDeclarations,
    FeatureFamily,
    InteractionState,
    Location,
    StateError,
    new_state,
)

LOG_SCHEMA = "coplan.eventlog"
LOG_VERSION = 1

EVENT_KINDS = frozenset(
    {
        "action_start",
        "action_end",
        "perceive_result",
        "human_event",
        "replan",
        "goal_reached",
        "wait_satisfied",
    }
)

# Belief-only holder marker: when perception shows an object has left every
# visible region, the robot assumes the human carried it off.  The tilde
# keeps the marker outside the declarable identifier space.
PHANTOM_EFFECTOR = "~held"

CAO_SIGMA_M = 0.005
PMD_SIGMA_M = 0.001
PMD_RADIUS_M = 0.1
MIN_PERCEIVE_S = 0.5
HANDOVER_GRASP_S = 0.5
IDLE_SCAN_S = 1.5

# How many consecutive recovery surveys may precede replanning attempts
# before a still-failing session is declared stuck. Surveys taken while the
# human is mid-motion can report a half-true world, so one round is not
# always enough; a bounded number keeps a truly unplannable state fatal.
MAX_RECOVERY_ROUNDS = 3


class SessionError(RuntimeError):
    """Execution-level failure inside a session."""


class DeadlockError(SessionError):
    """Goal unmet and no agent can make progress."""

    def __init__(self, message: str, diagnosis: dict):
        super().__init__(message)
        self.diagnosis = diagnosis


class PerceiveContextError(SessionError):
    """Perceive kind invalid in the current context."""


@dataclass(frozen=True)
class DurationSpec:
    """Uniform duration distribution: mean plus or minus jitter, in seconds."""

    mean: float
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.mean < 0 or self.jitter < 0:
            raise ValueError("durations must be non-negative")

    def draw(self, rng: random.Random, scale: float = 1.0) -> float:
        if self.jitter == 0.0:
            return self.mean * scale
        lo = self.mean - self.jitter
        hi = self.mean + self.jitter
        return max(0.0, rng.uniform(lo, hi)) * scale


# Keyed by action template, perceive kind, or "manipulate.<edit>" override.
# The detect_empty_box and detect_idle rows are declared defaults only: in a
# running session both end on state edges (box drained, human gone quiet),
# and detect_tool_pulling's row is the human's reaction latency to the
# offered object, drawn by the policy.
DEFAULT_DURATIONS: dict[str, DurationSpec] = {
    "move": DurationSpec(7.0, 1.75),
    "move.human": DurationSpec(2.5, 0.625),
    "grasp": DurationSpec(1.5),
    "release": DurationSpec(1.5),
    "manipulate": DurationSpec(11.0, 4.4),
    "manipulate.take_item": DurationSpec(0.5, 0.125),
    "manipulate.fasten": DurationSpec(1.0, 0.25),
    "check_available_objects": DurationSpec(1.2),
    "precise_marker_detection": DurationSpec(3.5),
    "detect_empty_box": DurationSpec(15.0, 5.0),
    "detect_tool_pulling": DurationSpec(10.0, 4.0),
    "detect_idle": DurationSpec(25.0, 10.0),
}

_DURATION_KEYS = (
    frozenset(DEFAULT_DURATIONS)
    | frozenset(f"manipulate.{name}" for name in EDITS)
    | frozenset(f"{t}.human" for t in ("move", "grasp", "release", "manipulate"))
)


@dataclass(frozen=True)
class ShearParams:
    """Shear-force model for the tool-pulling detector.

    The sensed force ramps once the human starts pulling; the detector
    fires when it exceeds baseline + k*sigma.  Sensor noise is folded into
    that adaptive margin, so the crossing is the closed-form k*sigma/ramp
    after the pull starts.
    """

    baseline: float = 0.1
    noise_sigma: float = 0.05
    ramp: float = 0.5
    k: float = 4.0

    def __post_init__(self) -> None:
        if self.baseline < 0 or self.noise_sigma < 0:
            raise ValueError("shear baseline and noise must be non-negative")
        if self.ramp <= 0 or self.k <= 0:
            raise ValueError("shear ramp and k must be positive")

    def crossing_delay(self) -> float:
        return self.k * self.noise_sigma / self.ramp


class PolicyKind(Enum):
    COMPLIANT = "compliant"
    INDEPENDENT_PICKER = "independent_picker"
    VARIABLE_SPEED = "variable_speed"
    ERROR_PRONE = "error_prone"
    INTERACTIVE = "interactive"


@dataclass(frozen=True)
class HumanPolicy:
    """Scripted human behavior plus its tunable parameters.

    think is the pause the human takes before committing to a pick-up;
    scale stretches every human duration (VariableSpeed), p_pick is the
    chance of independently fetching the next part when idle, p_drop the
    chance of losing a held object after each carry step.
    """

    kind: PolicyKind = PolicyKind.COMPLIANT
    p_pick: float = 0.5
    scale: float = 1.0
    p_drop: float = 0.1
    think: DurationSpec = DurationSpec(0.5, 0.25)

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_pick <= 1.0 or not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("policy probabilities must lie in [0, 1]")
        if self.scale <= 0:
            raise ValueError("speed scale must be positive")


@dataclass(frozen=True)
class Scenario:
    domain: str | DomainSource
    seed: int = 0
    policy: HumanPolicy = field(default_factory=HumanPolicy)
    durations: dict[str, DurationSpec] = field(default_factory=dict)
    perception_noise: float = 0.02
    shear: ShearParams = field(default_factory=ShearParams)
    max_events: int = 1_000_000

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if not 0.0 <= self.perception_noise <= 1.0:
            raise ValueError("perception_noise must lie in [0, 1]")
        for key in self.durations:
            if key not in _DURATION_KEYS:
                raise ValueError(f"unknown duration key {key!r}")
        if self.max_events <= 0:
            raise ValueError("max_events must be positive")

    def duration_table(self) -> dict[str, DurationSpec]:
        return DEFAULT_DURATIONS | self.durations


@dataclass(frozen=True)
class PerceiveResult:
    kind: PerceiveKind
    duration: float
    data: dict


@dataclass(frozen=True)
class InjectResult:
    accepted: bool
    reason: str
    violations: tuple[Violation, ...] = ()


def _json_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


def _ref_str(ref: tuple[str, str]) -> str:
    return f"{ref[0]}.{ref[1]}"


def _loc_list(loc: Location) -> list:
    return [loc.region, loc.coords[0], loc.coords[1]]


def state_record(state: InteractionState, decl: EntityDeclarations) -> dict:
    """Deterministic JSON encoding of an interaction state."""
    effectors = {}
    agents = {}
    for agent in decl.agents:
        pose = state.agent_poses[agent.name]
        for eff in agent.effectors:
            effectors[_ref_str((agent.name, eff))] = state.effector_free[
                (agent.name, eff)
            ]
        agents[agent.name] = {
            "base": _loc_list(pose.base),
            "ee": {eff: _loc_list(pose.ee_pose[eff]) for eff in agent.effectors},
            "grip": {eff: pose.gripper_opening[eff] for eff in agent.effectors},
        }
    objects = {}
    for obj in decl.objects:
        pose = state.object_poses[obj.name]
        traits = state.object_traits[obj.name]
        objects[obj.name] = {
            "at": _loc_list(pose.location),
            "orientation": pose.orientation,
            "dof": pose.internal_dof,
            "grasped_by": sorted(_ref_str(r) for r in traits.grasped_by),
            "assembled": traits.assembled,
            "content": traits.content_count,
            "extras": dict(sorted(traits.extras.items())),
        }
    return {
        "clock": state.clock,
        "effectors": effectors,
        "agents": agents,
        "objects": objects,
    }


def scenario_record(scenario: Scenario) -> dict:
    if isinstance(scenario.domain, str):
        domain_rec: dict = {"bundled": scenario.domain}
    else:
        domain_rec = {"source": scenario.domain.text}
    policy = scenario.policy
    return {
        "domain": domain_rec,
        "seed": scenario.seed,
        "policy": {
            "kind": policy.kind.value,
            "p_pick": policy.p_pick,
            "scale": policy.scale,
            "p_drop": policy.p_drop,
            "think": [policy.think.mean, policy.think.jitter],
        },
        "durations": {
            key: [spec.mean, spec.jitter]
            for key, spec in sorted(scenario.durations.items())
        },
        "perception_noise": scenario.perception_noise,
        "shear": [
            scenario.shear.baseline,
            scenario.shear.noise_sigma,
            scenario.shear.ramp,
            scenario.shear.k,
        ],
    }


def scenario_from_record(record: dict) -> Scenario:
    domain_rec = record["domain"]
    domain: str | DomainSource
    if "bundled" in domain_rec:
        domain = domain_rec["bundled"]
    else:
        domain = DomainSource(domain_rec["source"], origin="<eventlog>")
    pol = record["policy"]
    return Scenario(
        domain=domain,
        seed=record["seed"],
        policy=HumanPolicy(
            kind=PolicyKind(pol["kind"]),
            p_pick=pol["p_pick"],
            scale=pol["scale"],
            p_drop=pol["p_drop"],
            think=DurationSpec(*pol["think"]),
        ),
        durations={
            key: DurationSpec(*pair) for key, pair in record["durations"].items()
        },
        perception_noise=record["perception_noise"],
        shear=ShearParams(*record["shear"]),
    )


@dataclass
class EventLog:
    """Scenario echo, ordered event records, and the final ground truth."""

    scenario: dict
    events: list[dict]
    final_state: dict

    @property
    def goal_reached(self) -> bool:
        return any(e["kind"] == "goal_reached" for e in self.events)

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def dump(self) -> str:
        lines = [
            _json_line(
                {
                    "schema": LOG_SCHEMA,
                    "version": LOG_VERSION,
                    "scenario": self.scenario,
                }
            )
        ]
        lines.extend(_json_line(e) for e in self.events)
        lines.append(
            _json_line({"final_state": self.final_state, "events": len(self.events)})
        )
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str) -> "EventLog":
        lines = [line for line in text.splitlines() if line.strip()]
        if len(lines) < 2:
            raise ValueError("event log needs a meta line and a final line")
        meta = json.loads(lines[0])
        if meta.get("schema") != LOG_SCHEMA:
            raise ValueError(f"not a {LOG_SCHEMA} file")
        if meta.get("version") != LOG_VERSION:
            raise ValueError(f"unsupported log version {meta.get('version')!r}")
        tail = json.loads(lines[-1])
        events = [json.loads(line) for line in lines[1:-1]]
        if tail.get("events") != len(events):
            raise ValueError("event count mismatch in final line")
        return cls(meta["scenario"], events, tail["final_state"])

    @classmethod
    def read(cls, path: str | Path) -> "EventLog":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def apply_handover_grasp(
    state: InteractionState,
    decl: EntityDeclarations,
    agent: str,
    effector: str,
    obj: str,
    duration: float = 0.0,
) -> InteractionState:
    """Second grasp on an object the other kind of agent is holding.

    An ordinary Grasp refuses held objects; during a handover the receiver
    closes their hand on the offered object while the giver still holds it.
    """
    decl.object(obj)
    kind = decl.agent(agent).kind
    ref = (agent, effector)
    if ref not in state.effector_free:
        raise StateError(f"agent {agent!r} has no effector {effector!r}")
    if not state.effector_free[ref]:
        raise StateError(f"effector {ref} is not free")
    traits = state.object_traits[obj]
    if not traits.grasped_by:
        raise StateError(f"{obj!r} is not held; use a plain grasp")
    for holder, _ in traits.grasped_by:
        if decl.agent(holder).kind is kind:
            raise StateError(f"{obj!r} already held on the {kind.value} side")
    pose = state.agent_poses[agent]
    return replace(
        state,
        effector_free=state.effector_free | {ref: False},
        agent_poses=state.agent_poses
        | {agent: replace(pose, gripper_opening=pose.gripper_opening | {effector: 0.0})},
        object_traits=state.object_traits
        | {
            obj: replace(
                traits,
                grasped_by=traits.grasped_by | {ref},
                extras=dict(traits.extras) | {"grasped": "true"},
            )
        },
        clock=state.clock + duration,
    )


def load_domain(spec: str | DomainSource) -> Domain:
    if isinstance(spec, str):
        return load_bundled(spec)
    return parse(spec)


@dataclass
class _Active:
    """One in-flight action of a single agent."""

    token: int
    step: int | None  # index into the current plan; None for injected actions
    action: PrimitiveAction
    kind: str  # "act" | "perceive" | "wait" | "deb" | "di" | "dtp"
    start: float
    meta: dict
    generation: int = 0  # plan generation the step index refers to


class Session:
    """One seeded execution of a scenario.

    run() drives scripted sessions to completion; the gateway instead calls
    advance_until() on a wall-clock timer and inject_human_event() for
    operator input.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.domain = load_domain(scenario.domain)
        self.decl = self.domain.declarations
        self.rng = random.Random(scenario.seed)
        self.truth = new_state(self.decl)
        self.belief = new_state(self.decl)
        self.clock = 0.0
        self.events: list[dict] = []
        self.robot = self.domain.default_robot
        humans = [a.name for a in self.decl.agents if a.kind is AgentKind.HUMAN]
        self.human: str | None = humans[0] if humans else None
        self._agents = [self.robot] + humans
        self._table = scenario.duration_table()
        self._heap: list[tuple[float, int, str, tuple]] = []
        self._push_seq = 0
        self._token = 0
        self._plan: Plan | None = None
        self._steps: tuple[PrimitiveAction, ...] = ()
        self._agent_steps: dict[str, list[int]] = {}
        self._cursor: dict[str, int] = {}
        self._generation = 0
        self._active: dict[str, _Active | None] = {a: None for a in self._agents}
        self._queue: dict[str, deque[tuple[PrimitiveAction, dict]]] = {
            a: deque() for a in self._agents
        }
        self._completed_steps = 0
        self._physical_steps = 0
        self._replan_pending: tuple[str, str] | None = None
        self._recovery_queued = False
        self._recovery_rounds = 0
        self._pull_flag = False
        self._handover: dict | None = None
        self._declared_idle = True
        self._stall: dict[str, tuple[int, Verdict]] = {}
        self._blocked_logged: set[tuple[int, int]] = set()
        self._pause_until: dict[str, tuple[int, int] | None] = {
            a: None for a in self._agents
        }
        self._pause_taken: set[tuple[int, int]] = set()
        self._pick_armed = False
        self._q_last_completed = -1
        self._q_corrective_armed = False
        self._goal_reached = False
        self._started = False

    # -- public surface -------------------------------------------------

    @property
    def interactive(self) -> bool:
        return self.scenario.policy.kind is PolicyKind.INTERACTIVE

    @property
    def finished(self) -> bool:
        return self._goal_reached

    @property
    def plan(self) -> Plan:
        if self._plan is None:
            raise SessionError("session not started")
        return self._plan

    @property
    def generation(self) -> int:
        return self._generation

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self._install_plan(build_plan(self.domain, self.belief))
        self._resolve()

    def advance(self) -> bool:
        """Process the next timed event; False when nothing further can run."""
        if not self._started:
            self.start()
        if self._goal_reached:
            return False
        if len(self.events) > self.scenario.max_events:
            raise SessionError("event budget exceeded; runaway session")
        if not self._heap:
            self._quiescence()
            return not self._goal_reached and bool(self._heap)
        t, _, tag, data = heappop(self._heap)
        self.clock = t
        self._handle(tag, data)
        self._resolve()
        return True

    def advance_until(self, t: float) -> None:
        """Drain events due at or before virtual time t (gateway stepping)."""
        if not self._started:
            self.start()
        while self._heap and self._heap[0][0] <= t and not self._goal_reached:
            self.advance()
        if t > self.clock:
            self.clock = t
        if not self._goal_reached and not self._heap and self.interactive:
            if self._idle_everywhere() and self._truth_goal():
                self._log("goal_reached", None, {})
                self._goal_reached = True

    def run_to_completion(self) -> None:
        self.start()
        while not self._goal_reached:
            self.advance()

    def event_log(self) -> EventLog:
        return EventLog(
            scenario_record(self.scenario),
            list(self.events),
            state_record(self.truth, self.decl),
        )

    def state_snapshot(self) -> dict:
        """Ground-truth state as a JSON record (console rendering)."""
        return state_record(self.truth, self.decl)

    def plan_export(self) -> dict:
        return {
            "generation": self._generation,
            "steps": self.plan.export(),
            "completed": sorted(self._completed_indices()),
        }

    def inject_human_event(self, event: dict) -> InjectResult:
        """Validate and queue an operator-side human event."""
        if not self._started or self._goal_reached:
            return InjectResult(False, "session is not live")
        if self.human is None:
            return InjectResult(False, "domain declares no human agent")
        name = event.get("event")
        if name == "pick":
            return self._inject_pick(event)
        if name == "pull_tool":
            if self._handover is None:
                return InjectResult(
                    False,
                    "no tool handover in progress",
                    (
                        Violation(
                            "perceive_context",
                            frozenset({FeatureFamily.EFFECTORS}),
                            "tool-pull detection is armed only while the robot"
                            " presents a held tool",
                        ),
                    ),
                )
            self._do_pull(self._handover["token"])
            self._resolve()
            return InjectResult(True, "pull queued")
        if name == "idle_toggle":
            flag = bool(event.get("idle", True))
            self._declared_idle = flag
            self._log("human_event", self.human, {"event": "idle_state", "idle": flag})
            self._resolve()
            return InjectResult(True, f"idle flag set to {flag}")
        return InjectResult(False, f"unknown event {name!r}")

    def _inject_pick(self, event: dict) -> InjectResult:
        obj = event.get("object")
        assert self.human is not None
        try:
            self.decl.object(obj)
        except Exception:
            return InjectResult(False, f"unknown object {obj!r}")
        human = self.decl.agent(self.human)
        traits = self.truth.object_traits[obj]
        if traits.grasped_by:
            holder = sorted(_ref_str(r) for r in traits.grasped_by)[0]
            return InjectResult(
                False,
                f"{obj!r} is already grasped by {holder}",
                (
                    Violation(
                        "already_grasped",
                        frozenset({FeatureFamily.OBJECT_TRAITS}),
                        f"{obj!r} is already grasped",
                    ),
                ),
            )
        loc = self.truth.object_poses[obj].location
        if loc.region not in human.reach:
            return InjectResult(
                False,
                f"{obj!r} is outside the human's reach",
                (
                    Violation(
                        "out_of_reach",
                        frozenset({FeatureFamily.OBJECT_POSE}),
                        f"{obj!r} is in {loc.region!r}",
                    ),
                ),
            )
        if "grasp" not in human.capabilities:
            return InjectResult(False, "human cannot grasp")
        if self.interactive and (
            self._active[self.human] is not None or self._queue[self.human]
        ):
            # agents are serial; an announced pick needs the human actually free
            return InjectResult(False, "human is busy with another motion")
        hand = self._free_hand(self.human)
        if hand is None:
            return InjectResult(
                False,
                "human has no free hand",
                (
                    Violation(
                        "hands_full",
                        frozenset({FeatureFamily.EFFECTORS}),
                        "every hand is already holding something",
                    ),
                ),
            )
        dest = self._shared_destination(loc.region)
        self._log("human_event", self.human, {"event": "pick", "object": obj})
        if self.interactive:
            return self._interactive_pick(obj, hand, loc, dest)
        self._queue[self.human].extend(
            [
                (
                    PrimitiveAction(
                        ActionTemplate.MOVE, self.human, effector=hand, target=loc
                    ),
                    {},
                ),
                (
                    PrimitiveAction(
                        ActionTemplate.GRASP, self.human, effector=hand, object=obj
                    ),
                    {},
                ),
                (
                    PrimitiveAction(
                        ActionTemplate.MOVE, self.human, effector=hand, target=dest
                    ),
                    {},
                ),
                (
                    PrimitiveAction(
                        ActionTemplate.RELEASE, self.human, effector=hand, object=obj
                    ),
                    {},
                ),
            ]
        )
        self._resolve()
        return InjectResult(True, f"picking {obj!r} with {hand}")

    def _interactive_pick(self, obj: str, hand: str, loc, dest) -> InjectResult:
        """Operator-announced pick: the reach already happened on their side.

        The claim lands on the truth state at once so the robot can replan
        before starting anything else; only the carry back to the shared
        area still takes time.
        """
        assert self.human is not None
        reach = PrimitiveAction(
            ActionTemplate.MOVE, self.human, effector=hand, target=loc
        )
        grab = PrimitiveAction(
            ActionTemplate.GRASP, self.human, effector=hand, object=obj
        )
        for act in (reach, grab):
            try:
                self.truth = apply(
                    act, self.truth, self.decl, self.clock - self.truth.clock
                )
            except PreconditionError as exc:
                return InjectResult(False, f"pick is not possible now: {exc}")
            self._log(
                "action_start", self.human, {"step": None, "action": action_record(act)}
            )
            self._log(
                "action_end",
                self.human,
                {
                    "step": None,
                    "action": action_record(act),
                    "duration": 0.0,
                    "status": "ok",
                    "handover": False,
                },
            )
        # the announcement covers the whole motion, so the robot plans
        # against its endpoint: the object free on the shared bench. A
        # belief that showed the grip instead could be unplannable (other
        # stages fasten onto this part), and the carry resolves the gap.
        pose = self.belief.object_poses[obj]
        traits = self.belief.object_traits[obj]
        self.belief = replace(
            self.belief,
            object_poses=self.belief.object_poses
            | {obj: replace(pose, location=dest)},
            object_traits=self.belief.object_traits
            | {obj: replace(traits, grasped_by=frozenset())},
        )
        self._queue[self.human].extend(
            [
                (
                    PrimitiveAction(
                        ActionTemplate.MOVE, self.human, effector=hand, target=dest
                    ),
                    {"announced": True},
                ),
                (
                    PrimitiveAction(
                        ActionTemplate.RELEASE, self.human, effector=hand, object=obj
                    ),
                    {"announced": True},
                ),
            ]
        )
        self._set_replan("human_pick", obj)
        self._force_replan()
        self._resolve()
        return InjectResult(True, f"picked {obj!r} with {hand}")

    def _force_replan(self) -> None:
        """Replan now instead of at quiescence (interactive injects only).

        Informational actions of the outgoing plan are cut short; physical
        motions run to their natural end as stale-generation steps. The
        handover detector stays up because its machinery owns the joint
        grip lifecycle.
        """
        for agent in self._agents:
            active = self._active[agent]
            if active is not None and active.kind in ("wait", "perceive", "deb", "di"):
                self._active[agent] = None
                self._log(
                    "action_end",
                    agent,
                    {
                        "step": active.step,
                        "action": action_record(active.action),
                        "duration": self.clock - active.start,
                        "status": "superseded",
                        "handover": False,
                    },
                )
        if self._replan_pending is not None:
            self._do_replan()

    # -- plumbing -------------------------------------------------------

    def _log(self, kind: str, agent: str | None, payload: dict) -> None:
        self.events.append(
            {
                "t": self.clock,
                "seq": len(self.events),
                "kind": kind,
                "agent": agent,
                "payload": payload,
            }
        )

    def _schedule(self, t: float, tag: str, data: tuple) -> None:
        self._push_seq += 1
        heappush(self._heap, (t, self._push_seq, tag, data))

    def _handle(self, tag: str, data: tuple) -> None:
        if tag == "end":
            agent, token = data
            active = self._active[agent]
            if active is not None and active.token == token:
                self._finish(agent, active)
        elif tag == "pull":
            (token,) = data
            self._do_pull(token)
        elif tag == "resume":
            agent, gen, idx = data
            if self._pause_until[agent] == (gen, idx):
                self._pause_until[agent] = None
        elif tag == "pick":
            (gen,) = data
            if gen == self._generation:
                self._start_pick()

    # -- planning -------------------------------------------------------

    def _install_plan(self, new_plan: Plan) -> None:
        self._plan = new_plan
        self._steps = new_plan.steps
        self._generation += 1
        self._agent_steps = {a: [] for a in self._agents}
        for i, step in enumerate(self._steps):
            if step.agent in self._agent_steps:
                self._agent_steps[step.agent].append(i)
        self._cursor = {a: 0 for a in self._agents}
        self._stall.clear()
        self._pick_armed = False
        self._put_down_held()

    def _put_down_held(self) -> None:
        # A replan can land between a human's grasp and the matching release,
        # orphaning the release and wedging that hand for the rest of the
        # session.  The robot cannot cancel a grip it does not own, so the
        # human simply finishes the motion: put the thing down where they are.
        if self.human is None:
            return
        pending_release = {
            queued.object
            for queued, _ in self._queue[self.human]
            if queued.template is ActionTemplate.RELEASE
        }
        for eff in self.decl.agent(self.human).effectors:
            held = self.truth.held_object(self.human, eff)
            if held is None:
                continue
            if held in pending_release:
                continue  # the release is already on its way
            holders = self.truth.object_traits[held].grasped_by
            if any(ref[0] == self.robot for ref in holders):
                continue  # joint grip mid-handover; that resolves on its own
            self._log("human_event", self.human, {"event": "put_down", "object": held})
            self._queue[self.human].append(
                (
                    PrimitiveAction(
                        ActionTemplate.RELEASE, self.human, effector=eff, object=held
                    ),
                    {"put_down": True},
                )
            )

    def _next_step_index(self, agent: str) -> int | None:
        steps = self._agent_steps.get(agent, [])
        cur = self._cursor.get(agent, 0)
        return steps[cur] if cur < len(steps) else None

    def _completed_indices(self) -> list[int]:
        done = []
        for agent, steps in self._agent_steps.items():
            done.extend(steps[: self._cursor[agent]])
        return done

    def _set_replan(self, reason: str, detail: str = "") -> None:
        if self._replan_pending is None:
            self._replan_pending = (reason, detail)

    def _replan_due(self) -> bool:
        if self._replan_pending is None:
            return False
        if any(self._active[a] is not None for a in self._agents):
            return False
        return not any(self._queue[a] for a in self._agents)

    def _do_replan(self) -> None:
        assert self._replan_pending is not None
        reason, detail = self._replan_pending
        self._replan_pending = None
        try:
            new_plan = build_plan(self.domain, self.belief)
        except PlanningError as exc:
            if self.human is not None and (
                self._active[self.human] is not None or self._queue[self.human]
            ):
                # mid-motion worlds are routinely unplannable (a carried part
                # blocks every stage that fastens onto it); hold the replan
                # until the motion lands rather than giving up
                self._replan_pending = (reason, detail)
                return
            if (
                not self._recovery_queued
                and self._recovery_rounds < MAX_RECOVERY_ROUNDS
            ):
                self._queue_recovery_scan()
                return
            raise SessionError(f"replanning failed: {exc}") from exc
        self._recovery_queued = False
        self._recovery_rounds = 0
        self._install_plan(new_plan)
        self._log(
            "replan",
            self.robot,
            {"reason": reason, "detail": detail, "steps": len(new_plan.steps)},
        )

    def _queue_recovery_scan(self) -> None:
        # when stuck, look again: a fresh survey precedes the next attempt
        self._recovery_queued = True
        self._recovery_rounds += 1
        self._queue[self.robot].append(
            (
                PrimitiveAction(
                    ActionTemplate.PERCEIVE,
                    self.robot,
                    perceive_kind=PerceiveKind.CHECK_AVAILABLE_OBJECTS,
                ),
                {"recovery": True},
            )
        )

    def _truth_goal(self) -> bool:
        try:
            return len(build_plan(self.domain, self.truth).steps) == 0
        except PlanningError:
            return False

    # -- the dispatch / edge / replan fixpoint --------------------------

    def _resolve(self) -> None:
        while True:
            progressed = self._edges()
            if self._replan_due():
                self._do_replan()
                progressed = True
            for agent in self._agents:
                progressed = self._try_dispatch(agent) or progressed
            if not self._pick_armed:
                progressed = self._maybe_pick() or progressed
            if not progressed:
                break

    def _idle_everywhere(self) -> bool:
        return all(self._active[a] is None for a in self._agents) and not any(
            self._queue[a] for a in self._agents
        )

    def _truth_idle(self) -> bool:
        if self.human is None:
            return True
        return (
            self._active[self.human] is None
            and not self._queue[self.human]
            and self._declared_idle
        )

    def _human_gate(self, wait_index: int | None) -> bool:
        """All human plan steps ordered before the wait are complete."""
        if self.human is None or wait_index is None:
            return True
        nxt = self._next_step_index(self.human)
        return nxt is None or nxt > wait_index

    def _wait_satisfied(self, cond: WaitCondition, active: _Active) -> bool:
        if cond.name == "pull_signal":
            return self._pull_flag
        if cond.name == "human_idle":
            return self._truth_idle() and self._human_gate(active.step)
        if cond.name == "box_empty":
            assert cond.object is not None
            return self.truth.object_traits[cond.object].content_count == 0
        if cond.name == "object_available":
            assert cond.object is not None
            traits = self.truth.object_traits[cond.object]
            loc = self.truth.object_poses[cond.object].location
            robot_reach = self.decl.agent(self.robot).reach
            return not traits.grasped_by and loc.region in robot_reach
        raise SessionError(f"unknown wait condition {cond.name!r}")

    def _edges(self) -> bool:
        progressed = False
        for agent in self._agents:
            active = self._active[agent]
            if active is None:
                continue
            if active.kind == "wait":
                assert active.action.wait_condition is not None
                if self._wait_satisfied(active.action.wait_condition, active):
                    self._finish(agent, active)
                    progressed = True
            elif active.kind == "deb" and not active.meta.get("scheduled"):
                target = active.meta["target"]
                if self.truth.object_traits[target].content_count == 0:
                    self._finish(agent, active)
                    progressed = True
            elif active.kind == "di" and not active.meta.get("scheduled"):
                if self._truth_idle():
                    self._finish(agent, active)
                    progressed = True
        return progressed

    def _try_dispatch(self, agent: str) -> bool:
        if self._active[agent] is not None or self._goal_reached:
            return False
        if self._pause_until[agent] is not None:
            return False
        queue = self._queue[agent]
        if queue:
            action, meta = queue[0]
            if not self._guard_injected(agent, action, meta):
                return True  # queue was aborted; that counts as progress
            queue.popleft()
            self._begin(agent, None, action, meta)
            return True
        if self._replan_pending is not None:
            return False
        idx = self._next_step_index(agent)
        if idx is None:
            return False
        action = self._steps[idx]
        if self._maybe_pause(agent, idx, action):
            return True
        verdict = self._dispatch_verdict(agent, idx, action)
        if verdict is not None:
            return False
        self._begin(agent, idx, action, {})
        return True

    def _dispatch_verdict(
        self, agent: str, idx: int, action: PrimitiveAction
    ) -> Verdict | None:
        """None when dispatch may proceed; otherwise the blocking verdict."""
        if (
            action.template is ActionTemplate.PERCEIVE
            and action.perceive_kind is PerceiveKind.DETECT_TOOL_PULLING
        ):
            if self._held_by_robot() is None:
                verdict = Verdict(
                    (
                        Violation(
                            "perceive_context",
                            frozenset({FeatureFamily.EFFECTORS}),
                            "tool-pull detection needs a held object",
                        ),
                    )
                )
                self._divert(agent, idx, action, verdict, truth_side=False)
                return verdict
            return None
        if agent == self.robot:
            belief_verdict = preconditions(action, self.belief, self.decl)
            if not belief_verdict.ok:
                self._divert(agent, idx, action, belief_verdict, truth_side=False)
                return belief_verdict
        truth_verdict = preconditions(action, self.truth, self.decl)
        if not truth_verdict.ok:
            self._divert(agent, idx, action, truth_verdict, truth_side=True)
            return truth_verdict
        self._stall.pop(agent, None)
        return None

    def _divert(
        self,
        agent: str,
        idx: int,
        action: PrimitiveAction,
        verdict: Verdict,
        truth_side: bool,
    ) -> None:
        """Decide between a transient stall and a real divergence."""
        other = self.human if agent == self.robot else self.robot
        if other is not None:
            other_next = self._next_step_index(other)
            if other_next is not None and other_next < idx:
                # the other agent has not caught up yet; retry on its progress
                self._stall[agent] = (idx, verdict)
                return
        if agent == self.robot:
            if truth_side:
                self._sync_failure(action)
            why = "; ".join(v.message for v in verdict.violations)
            self._set_replan(
                "dispatch_failure" if truth_side else "belief_mismatch", why
            )
        else:
            key = (self._generation, idx)
            if key not in self._blocked_logged:
                self._blocked_logged.add(key)
                why = "; ".join(v.message for v in verdict.violations)
                self._log(
                    "human_event",
                    agent,
                    {"event": "blocked", "step": idx, "why": why},
                )
            self._stall[agent] = (idx, verdict)

    def _sync_failure(self, action: PrimitiveAction) -> None:
        """After a failed dispatch the robot re-reads the entities involved."""
        if action.object is not None:
            self._sync_object(action.object)

    def _sync_object(self, obj: str) -> None:
        truth_pose = self.truth.object_poses[obj]
        truth_traits = self.truth.object_traits[obj]
        holders = set()
        for ref in truth_traits.grasped_by:
            if ref[0] == self.robot:
                holders.add(ref)
            else:
                holders.add((ref[0], PHANTOM_EFFECTOR))
        self.belief = replace(
            self.belief,
            object_poses=self.belief.object_poses | {obj: truth_pose},
            object_traits=self.belief.object_traits
            | {obj: replace(truth_traits, grasped_by=frozenset(holders))},
        )

    def _maybe_pause(self, agent: str, idx: int, action: PrimitiveAction) -> bool:
        """Scripted humans take a short think pause before each pick-up."""
        policy = self.scenario.policy
        if (
            agent != self.human
            or self.interactive
            or action.template is not ActionTemplate.GRASP
        ):
            return False
        key = (self._generation, idx)
        if key in self._pause_taken:
            return False
        if self._dispatch_verdict(agent, idx, action) is not None:
            return False  # not ready anyway; pause would just hide the stall
        self._pause_taken.add(key)
        self._pause_until[agent] = key
        delay = policy.think.draw(self.rng, policy.scale)
        self._schedule(self.clock + delay, "resume", (agent, *key))
        return True

    def _guard_injected(self, agent: str, action: PrimitiveAction, meta: dict) -> bool:
        """Check a queued injected action right before it runs."""
        if meta.get("handover"):
            h = self._handover
            ok = (
                h is not None
                and self.truth.effector_free.get(
                    (action.agent, action.effector or ""), False
                )
                and any(
                    ref[0] != action.agent
                    for ref in self.truth.object_traits[action.object].grasped_by
                )
            )
            if not ok:
                self._abort_queue(agent, "handover no longer possible")
                return False
            return True
        if action.template in (ActionTemplate.WAIT, ActionTemplate.PERCEIVE):
            return True
        verdict = preconditions(action, self.truth, self.decl)
        if not verdict.ok:
            why = "; ".join(v.message for v in verdict.violations)
            self._abort_queue(agent, why)
            return False
        return True

    def _abort_queue(self, agent: str, why: str) -> None:
        self._queue[agent].clear()
        self._log("human_event", agent, {"event": "abort", "why": why})

    # -- action lifecycle -----------------------------------------------

    def _duration_key(self, action: PrimitiveAction) -> str:
        if action.template is ActionTemplate.PERCEIVE:
            assert action.perceive_kind is not None
            return action.perceive_kind.value
        if action.template is ActionTemplate.MANIPULATE and action.edit_name:
            override = f"manipulate.{action.edit_name}"
            if override in self._table:
                return override
        if action.agent == self.human:
            # arms and hands move at very different speeds
            override = f"{action.template.value}.human"
            if override in self._table:
                return override
        return action.template.value

    def _begin(
        self, agent: str, step: int | None, action: PrimitiveAction, meta: dict
    ) -> None:
        self._token += 1
        kind = "act"
        if action.template is ActionTemplate.WAIT:
            kind = "wait"
        elif action.template is ActionTemplate.PERCEIVE:
            kind = {
                PerceiveKind.CHECK_AVAILABLE_OBJECTS: "perceive",
                PerceiveKind.PRECISE_MARKER_DETECTION: "perceive",
                PerceiveKind.DETECT_EMPTY_BOX: "deb",
                PerceiveKind.DETECT_IDLE: "di",
                PerceiveKind.DETECT_TOOL_PULLING: "dtp",
            }[action.perceive_kind]
        active = _Active(
            self._token, step, action, kind, self.clock, dict(meta), self._generation
        )
        self._active[agent] = active
        if agent == self.human:
            self._pick_armed = False
        if meta.get("handover"):
            self._log(
                "human_event", agent, {"event": "pull_tool", "object": action.object}
            )
        self._log(
            "action_start",
            agent,
            {"step": step, "action": action_record(action)},
        )
        policy = self.scenario.policy
        scale = policy.scale if agent == self.human else 1.0
        if kind == "act":
            if meta.get("handover"):
                dur = HANDOVER_GRASP_S * scale
            else:
                dur = self._table[self._duration_key(action)].draw(self.rng, scale)
            active.meta["duration"] = dur
            active.meta["scheduled"] = True
            self._schedule(self.clock + dur, "end", (agent, active.token))
        elif kind == "perceive":
            dur = self._table[self._duration_key(action)].draw(self.rng)
            active.meta["scheduled"] = True
            self._schedule(self.clock + dur, "end", (agent, active.token))
        elif kind == "deb":
            target = self._deb_target(step)
            active.meta["target"] = target
            if self.truth.object_traits[target].content_count == 0:
                active.meta["scheduled"] = True
                self._schedule(
                    self.clock + MIN_PERCEIVE_S, "end", (agent, active.token)
                )
        elif kind == "di":
            if self._truth_idle():
                active.meta["scheduled"] = True
                self._schedule(self.clock + IDLE_SCAN_S, "end", (agent, active.token))
        elif kind == "dtp":
            self._begin_handover(agent, active)
        # waits resolve purely on edges

    def _begin_handover(self, agent: str, active: _Active) -> None:
        held = self._held_by_robot()
        assert held is not None  # dispatch guard filtered the empty-gripper case
        self._pull_flag = False
        self._handover = {
            "token": active.token,
            "object": held,
            "agent": agent,
        }
        delay = self._policy_pull_delay()
        if delay is not None:
            self._schedule(self.clock + delay, "pull", (active.token,))

    def _policy_pull_delay(self) -> float | None:
        policy = self.scenario.policy
        if policy.kind is PolicyKind.INTERACTIVE:
            return None  # the operator pulls via inject_human_event
        return self._table["detect_tool_pulling"].draw(self.rng, policy.scale)

    def _held_by_robot(self) -> str | None:
        for eff in self.decl.agent(self.robot).effectors:
            held = self.truth.held_object(self.robot, eff)
            if held is not None:
                return held
        return None

    def _deb_target(self, step: int | None) -> str:
        if step is not None:
            for later in self._steps[step + 1 :]:
                wc = later.wait_condition
                if wc is not None and wc.name == "box_empty":
                    assert wc.object is not None
                    return wc.object
        for obj in self.decl.objects:
            if self.truth.object_traits[obj.name].content_count is not None:
                return obj.name
        raise PerceiveContextError("no container to watch for emptiness")

    def _do_pull(self, token: int) -> None:
        h = self._handover
        if h is None or h["token"] != token:
            return  # the handover this pull belonged to is gone
        obj = h["object"]
        if self._held_by_robot() != obj:
            return
        assert self.human is not None
        human = self.decl.agent(self.human)
        hand = self._free_hand(self.human, prefer="left")
        if hand is None:
            hand = self._preferred_hand(human, prefer="left")
        self._queue[self.human].append(
            (
                PrimitiveAction(
                    ActionTemplate.GRASP, self.human, effector=hand, object=obj
                ),
                {"handover": True, "token": token},
            )
        )

    def _preferred_hand(self, agent_decl, prefer: str = "right") -> str:
        if prefer in agent_decl.effectors:
            return prefer
        return agent_decl.effectors[0]

    def _free_hand(self, agent: str, prefer: str = "right") -> str | None:
        order = list(self.decl.agent(agent).effectors)
        if prefer in order:
            order.remove(prefer)
            order.insert(0, prefer)
        for eff in order:
            if self.truth.effector_free.get((agent, eff), False):
                return eff
        return None

    def _shared_destination(self, source: str) -> Location:
        robot_reach = self.decl.agent(self.robot).reach
        assert self.human is not None
        human_reach = self.decl.agent(self.human).reach
        for region in self.decl.regions:
            if (
                region.visible
                and region.name != source
                and region.name in robot_reach
                and region.name in human_reach
            ):
                return self.decl.region_location(region.name)
        return self.decl.region_location(source)

    def _stow_region(self) -> str:
        assert self.human is not None
        robot_reach = self.decl.agent(self.robot).reach
        for name in sorted(self.decl.agent(self.human).reach):
            if name not in robot_reach:
                return name
        return sorted(self.decl.agent(self.human).reach)[0]

    def _finish(self, agent: str, active: _Active) -> None:
        action = active.action
        elapsed = self.clock - active.start
        status = "ok"
        if active.kind in ("act", "wait"):
            applied = self._apply_truth(agent, active)
            if not applied:
                status = "failed"
        if active.kind == "wait" and status == "ok":
            assert action.wait_condition is not None
            self._log(
                "wait_satisfied",
                agent,
                {
                    "step": active.step,
                    "condition": action.wait_condition.name,
                    "object": action.wait_condition.object,
                },
            )
        if active.kind in ("perceive", "deb", "di", "dtp"):
            self._finish_perceive(agent, active, elapsed)
        self._active[agent] = None
        self._log(
            "action_end",
            agent,
            {
                "step": active.step,
                "action": action_record(action),
                "duration": elapsed,
                "status": status,
                "handover": bool(active.meta.get("handover")),
            },
        )
        if (
            status == "ok"
            and active.step is not None
            and active.generation == self._generation
        ):
            # a step that outlived its plan still happened physically, but it
            # must not advance the cursor of the plan that replaced it
            self._cursor[agent] += 1
            self._completed_steps += 1
        if status == "ok":
            if action.template in (
                ActionTemplate.GRASP,
                ActionTemplate.RELEASE,
                ActionTemplate.MOVE,
                ActionTemplate.MANIPULATE,
            ):
                # perceives and waits alone are not progress; a stuck session
                # re-surveying forever must still count as deadlocked
                self._physical_steps += 1
                self._q_corrective_armed = False
            self._after_success(agent, active)
        if active.meta.get("recovery"):
            self._recovery_queued = False
            self._set_replan("recovery", "post-recovery survey")

    def _apply_truth(self, agent: str, active: _Active) -> bool:
        action = active.action
        duration = self.clock - self.truth.clock
        if active.meta.get("handover"):
            assert action.effector is not None and action.object is not None
            try:
                self.truth = apply_handover_grasp(
                    self.truth,
                    self.decl,
                    agent,
                    action.effector,
                    action.object,
                    duration,
                )
            except StateError:
                return False
            self._after_handover_grasp(active)
            return True
        try:
            self.truth = apply(action, self.truth, self.decl, duration)
        except PreconditionError as exc:
            # the world changed while the action was in flight
            if agent == self.robot:
                self._sync_failure(action)
                self._set_replan("dispatch_failure", str(exc))
            return False
        if agent == self.robot:
            try:
                self.belief = apply(
                    action, self.belief, self.decl, self.clock - self.belief.clock
                )
            except PreconditionError:
                # belief drifted mid-flight; trust what actually happened
                if action.object is not None:
                    self._sync_object(action.object)
        return True

    def _after_handover_grasp(self, active: _Active) -> None:
        """The pull has physically started; schedule the detector crossing."""
        h = self._handover
        if h is None or h["token"] != active.meta.get("token"):
            return
        robot_active = self._active[self.robot]
        if robot_active is None or robot_active.token != h["token"]:
            return
        robot_active.meta["scheduled"] = True
        fire = self.clock + self.scenario.shear.crossing_delay()
        self._schedule(fire, "end", (self.robot, h["token"]))

    def _after_success(self, agent: str, active: _Active) -> None:
        action = active.action
        policy = self.scenario.policy
        h = self._handover
        if (
            agent == self.robot
            and action.template is ActionTemplate.RELEASE
            and h is not None
            and action.object == h["object"]
        ):
            self._handover = None
            assert action.object is not None
            # the pull was detected, so the robot knows who holds it now
            self._believe_human_holds(action.object)
            self._queue_stow(action.object)
            return
        if (
            agent == self.human
            and action.template is ActionTemplate.RELEASE
            and active.meta.get("announced")
            and action.object is not None
        ):
            # the announced carry has landed; the projection made at claim
            # time is now literally true, and any survey that ran mid-carry
            # and wrote the part off as held gets corrected here
            self._sync_object(action.object)
            return
        if (
            agent == self.human
            and policy.kind is PolicyKind.ERROR_PRONE
            and action.template in (ActionTemplate.GRASP, ActionTemplate.MOVE)
            and not active.meta.get("handover")
        ):
            held = self._held_by(agent)
            if held is not None and self.rng.random() < policy.p_drop:
                hand = next(
                    eff
                    for eff in self.decl.agent(agent).effectors
                    if self.truth.held_object(agent, eff) == held
                )
                self._log("human_event", agent, {"event": "drop", "object": held})
                self._queue[agent].appendleft(
                    (
                        PrimitiveAction(
                            ActionTemplate.RELEASE, agent, effector=hand, object=held
                        ),
                        {"drop": True},
                    )
                )

    def _held_by(self, agent: str) -> str | None:
        for eff in self.decl.agent(agent).effectors:
            held = self.truth.held_object(agent, eff)
            if held is not None:
                return held
        return None

    def _queue_stow(self, obj: str) -> None:
        """After receiving a handover the human parks the object at home."""
        if self.human is None:
            return
        hand = None
        for eff in self.decl.agent(self.human).effectors:
            if self.truth.held_object(self.human, eff) == obj:
                hand = eff
        if hand is None:
            return
        dest = self.decl.region_location(self._stow_region())
        self._queue[self.human].extend(
            [
                (
                    PrimitiveAction(
                        ActionTemplate.MOVE, self.human, effector=hand, target=dest
                    ),
                    {},
                ),
                (
                    PrimitiveAction(
                        ActionTemplate.RELEASE, self.human, effector=hand, object=obj
                    ),
                    {},
                ),
            ]
        )

    # -- the independent picker ----------------------------------------

    def _maybe_pick(self) -> bool:
        policy = self.scenario.policy
        if (
            policy.kind is not PolicyKind.INDEPENDENT_PICKER
            or self.human is None
            or self._goal_reached
            or self._replan_pending is not None
        ):
            return False
        if self._active[self.human] is not None or self._queue[self.human]:
            return False
        idx = self._next_step_index(self.human)
        pausing = self._pause_until[self.human] is not None
        if idx is not None and self.human not in self._stall and not pausing:
            return False  # a plan step is about to run; no side trip
        robot_busy = (
            self._active[self.robot] is not None
            or self._next_step_index(self.robot) is not None
        )
        if not robot_busy:
            return False
        candidate = self._pick_candidate()
        if candidate is None:
            return False
        self._pick_armed = True  # one roll per idle episode
        if self.rng.random() >= policy.p_pick:
            return False
        delay = policy.think.draw(self.rng, policy.scale)
        self._schedule(self.clock + delay, "pick", (self._generation,))
        return True

    def _pick_candidate(self) -> str | None:
        """The next part the robot still intends to fetch, if takeable now."""
        assert self.human is not None
        human_reach = self.decl.agent(self.human).reach
        robot_next = self._next_step_index(self.robot) or 0
        for i in range(robot_next, len(self._steps)):
            step = self._steps[i]
            if step.agent != self.robot or step.template is not ActionTemplate.GRASP:
                continue
            obj = step.object
            assert obj is not None
            if self.decl.object(obj).kind != "component":
                continue
            traits = self.truth.object_traits[obj]
            if traits.grasped_by or traits.assembled:
                continue
            if self.truth.object_poses[obj].location.region in human_reach:
                return obj
        return None

    def _start_pick(self) -> None:
        if self.human is None or self._queue[self.human]:
            return
        if self._active[self.human] is not None:
            return
        candidate = self._pick_candidate()
        if candidate is None:
            return
        result = self._inject_pick({"event": "pick", "object": candidate})
        if not result.accepted:
            return

    # -- perception -----------------------------------------------------

    def _finish_perceive(self, agent: str, active: _Active, elapsed: float) -> None:
        kind = active.action.perceive_kind
        assert kind is not None
        data: dict
        contradiction = False
        if kind is PerceiveKind.CHECK_AVAILABLE_OBJECTS:
            data = self._cao_data()
            contradiction = self._merge_cao(data, active.step)
        elif kind is PerceiveKind.PRECISE_MARKER_DETECTION:
            data = self._pmd_data(agent)
            contradiction = self._merge_markers(data)
        elif kind is PerceiveKind.DETECT_EMPTY_BOX:
            target = active.meta["target"]
            data = {"box": target, "box_empty": True}
            traits = self.belief.object_traits[target]
            self.belief = replace(
                self.belief,
                object_traits=self.belief.object_traits
                | {target: replace(traits, content_count=0)},
            )
        elif kind is PerceiveKind.DETECT_IDLE:
            flag = self._truth_idle()
            if self.rng.random() < self.scenario.perception_noise:
                flag = not flag
            data = {"idle": flag}
        else:  # DETECT_TOOL_PULLING
            self._pull_flag = True
            data = {
                "pull_detected": True,
                "object": self._handover["object"] if self._handover else None,
            }
        self._log(
            "perceive_result",
            agent,
            {"kind": kind.value, "duration": elapsed, "data": data},
        )
        # perceives advance the clock but touch no features
        self.truth = apply(active.action, self.truth, self.decl,
                           self.clock - self.truth.clock)
        if agent == self.robot:
            self.belief = apply(active.action, self.belief, self.decl,
                                self.clock - self.belief.clock)
        if contradiction:
            self._set_replan("perceive_contradiction", kind.value)

    def _visible_regions(self) -> set[str]:
        return {r.name for r in self.decl.regions if r.visible}

    def _cao_data(self) -> dict:
        visible = self._visible_regions()
        out = []
        for obj in self.decl.objects:
            traits = self.truth.object_traits[obj.name]
            loc = self.truth.object_poses[obj.name].location
            if traits.grasped_by or loc.region not in visible:
                continue
            region = self.decl.region(loc.region)
            x, y = region.clamp(
                (
                    loc.coords[0] + self.rng.gauss(0.0, CAO_SIGMA_M),
                    loc.coords[1] + self.rng.gauss(0.0, CAO_SIGMA_M),
                )
            )
            out.append(
                {
                    "object": obj.name,
                    "region": loc.region,
                    "x": x,
                    "y": y,
                    "assembled": traits.assembled,
                    "content": traits.content_count,
                }
            )
        return {"objects": out}

    def _pmd_data(self, agent: str) -> dict:
        eff = self.decl.agent(agent).effectors[0]
        ee = self.truth.agent_poses[agent].ee_pose[eff]
        out = []
        for obj in self.decl.objects:
            traits = self.truth.object_traits[obj.name]
            loc = self.truth.object_poses[obj.name].location
            if traits.grasped_by:
                continue
            dx = loc.coords[0] - ee.coords[0]
            dy = loc.coords[1] - ee.coords[1]
            if dx * dx + dy * dy > PMD_RADIUS_M * PMD_RADIUS_M:
                continue
            region = self.decl.region(loc.region)
            x, y = region.clamp(
                (
                    loc.coords[0] + self.rng.gauss(0.0, PMD_SIGMA_M),
                    loc.coords[1] + self.rng.gauss(0.0, PMD_SIGMA_M),
                )
            )
            out.append({"object": obj.name, "region": loc.region, "x": x, "y": y})
        return {"objects": out}

    def _merge_markers(self, data: dict) -> bool:
        contradiction = False
        for entry in data["objects"]:
            contradiction = self._merge_sighting(entry) or contradiction
        return contradiction

    def _merge_cao(self, data: dict, step: int | None) -> bool:
        contradiction = self._merge_markers(data)
        reported = {entry["object"] for entry in data["objects"]}
        visible = self._visible_regions()
        for obj in self.decl.objects:
            if obj.name in reported:
                continue
            traits = self.belief.object_traits[obj.name]
            loc = self.belief.object_poses[obj.name].location
            if traits.grasped_by or loc.region not in visible:
                continue
            # believed in view but not seen: someone took it; only a taking
            # the plan itself does not anticipate invalidates the plan
            self._believe_human_holds(obj.name)
            if not self._absence_explained(obj.name, step):
                contradiction = True
        return contradiction

    def _absence_explained(self, obj: str, step: int | None) -> bool:
        """Was this object due to be handled by the human about now?

        True when an uncompleted human plan step ordered before the running
        perceive works on the object, i.e. the human picking it up is the
        plan unfolding, not a deviation.
        """
        if self.human is None:
            return False
        horizon = step if step is not None else len(self._steps)
        cur = self._cursor[self.human]
        for idx in self._agent_steps[self.human][cur:]:
            if idx >= horizon:
                break
            if self._steps[idx].object == obj:
                return True
        return False

    def _believe_human_holds(self, obj: str) -> None:
        holder = self.human if self.human is not None else self.robot
        traits = self.belief.object_traits[obj]
        self.belief = replace(
            self.belief,
            object_traits=self.belief.object_traits
            | {
                obj: replace(
                    traits,
                    grasped_by=frozenset({(holder, PHANTOM_EFFECTOR)}),
                )
            },
        )

    def _merge_sighting(self, entry: dict) -> bool:
        """Fold one reported object into the belief; True on a surprise.

        Sub-region jitter is sensor noise and merges quietly, as does a
        carried-off part reappearing assembled (the human finished their
        job).  A region change, or a carried-off object back in view still
        unassembled, means the world moved under the current plan.
        """
        obj = entry["object"]
        belief_traits = self.belief.object_traits[obj]
        if any(ref[0] == self.robot for ref in belief_traits.grasped_by):
            return False  # the robot knows its own hand better than the camera
        belief_pose = self.belief.object_poses[obj]
        if belief_traits.grasped_by:
            contradiction = not entry.get("assembled", False)
        else:
            contradiction = belief_pose.location.region != entry["region"]
        self.belief = replace(
            self.belief,
            object_poses=self.belief.object_poses
            | {
                obj: replace(
                    belief_pose,
                    location=Location(entry["region"], (entry["x"], entry["y"])),
                )
            },
            object_traits=self.belief.object_traits
            | {
                obj: replace(
                    belief_traits,
                    grasped_by=frozenset(),
                    assembled=entry.get("assembled", belief_traits.assembled),
                    content_count=entry.get("content", belief_traits.content_count),
                )
            },
        )
        return contradiction

    # -- quiescence and deadlock ----------------------------------------

    def _quiescence(self) -> None:
        if self._truth_goal():
            self._log("goal_reached", None, {})
            self._goal_reached = True
            return
        if self.interactive:
            return  # parked until the operator acts
        if (
            self._physical_steps == self._q_last_completed
            and self._q_corrective_armed
        ):
            raise DeadlockError(
                "goal unmet and no agent can make progress", self._diagnosis()
            )
        self._q_last_completed = self._physical_steps
        self._q_corrective_armed = True
        for agent in self._agents:
            active = self._active[agent]
            if active is not None and active.kind in ("wait", "deb", "di", "dtp"):
                self._active[agent] = None
                self._log(
                    "action_end",
                    agent,
                    {
                        "step": active.step,
                        "action": action_record(active.action),
                        "duration": self.clock - active.start,
                        "status": "aborted",
                        "handover": False,
                    },
                )
        self._queue_recovery_scan()
        self._resolve()

    def _diagnosis(self) -> dict:
        out: dict = {"t": self.clock, "agents": {}}
        for agent in self._agents:
            nxt = self._next_step_index(agent)
            entry: dict = {"next_step": nxt}
            if nxt is not None:
                entry["action"] = action_record(self._steps[nxt])
            if agent in self._stall:
                idx, verdict = self._stall[agent]
                entry["blocked_on"] = idx
                entry["why"] = [v.message for v in verdict.violations]
            out["agents"][agent] = entry
        return out


def run_session(scenario: Scenario) -> Session:
    """Execute a scripted scenario to completion, returning the session."""
    if scenario.policy.kind is PolicyKind.INTERACTIVE:
        raise ValueError("interactive sessions run through the session gateway")
    session = Session(scenario)
    session.run_to_completion()
    return session


def run(scenario: Scenario) -> EventLog:
    return run_session(scenario).event_log()


def inject_human_event(session: Session, event: dict) -> InjectResult:
    return session.inject_human_event(event)


def simulate_perceive(kind: PerceiveKind, session: Session) -> PerceiveResult:
    """One synchronous sensor read against the session's current truth.

    In a running session the perceive plan steps stretch over time and end
    on state edges; this entry point answers immediately with a snapshot,
    drawing any noise from the session's stream.
    """
    table = session.scenario.duration_table()
    if kind is PerceiveKind.CHECK_AVAILABLE_OBJECTS:
        return PerceiveResult(kind, table[kind.value].mean, session._cao_data())
    if kind is PerceiveKind.PRECISE_MARKER_DETECTION:
        return PerceiveResult(kind, table[kind.value].mean, session._pmd_data(session.robot))
    if kind is PerceiveKind.DETECT_EMPTY_BOX:
        target = session._deb_target(None)
        empty = session.truth.object_traits[target].content_count == 0
        duration = MIN_PERCEIVE_S if empty else table[kind.value].mean
        return PerceiveResult(kind, duration, {"box": target, "box_empty": empty})
    if kind is PerceiveKind.DETECT_IDLE:
        flag = session._truth_idle()
        if session.rng.random() < session.scenario.perception_noise:
            flag = not flag
        return PerceiveResult(kind, IDLE_SCAN_S, {"idle": flag})
    if kind is PerceiveKind.DETECT_TOOL_PULLING:
        held = session._held_by_robot()
        if held is None:
            raise PerceiveContextError(
                "tool-pull detection needs an object in the robot gripper"
            )
        return PerceiveResult(
            kind,
            MIN_PERCEIVE_S,
            {"pull_detected": session._pull_flag, "object": held},
        )
    raise PerceiveContextError(f"unknown perceive kind {kind!r}")


@dataclass
class ReplayReport:
    ok: bool
    state: InteractionState
    violations: list[str]
    mismatch: str | None


def replay(log: EventLog) -> ReplayReport:
    """Re-apply every completed action in the log and check the outcome.

    Each ok-status action_end must pass its preconditions and reproduce,
    step by step, the final ground truth the session recorded.
    """
    domain_rec = log.scenario["domain"]
    if "bundled" in domain_rec:
        domain = load_bundled(domain_rec["bundled"])
    else:
        domain = parse(DomainSource(domain_rec["source"], origin="<eventlog>"))
    decl = domain.declarations
    state = new_state(decl)
    violations: list[str] = []
    for event in log.events:
        if event["kind"] != "action_end":
            continue
        payload = event["payload"]
        if payload["status"] != "ok":
            continue
        action = action_from_record(payload["action"])
        duration = event["t"] - state.clock
        if payload.get("handover"):
            assert action.effector is not None and action.object is not None
            state = apply_handover_grasp(
                state, decl, action.agent, action.effector, action.object, duration
            )
            continue
        verdict = preconditions(action, state, decl)
        if not verdict.ok:
            msgs = "; ".join(v.message for v in verdict.violations)
            violations.append(f"seq {event['seq']}: {msgs}")
            continue
        state = apply(action, state, decl, duration)
    mismatch = None
    replayed = state_record(state, decl)
    if replayed != log.final_state:
        for key in ("clock", "effectors", "agents", "objects"):
            if replayed.get(key) != log.final_state.get(key):
                mismatch = key
                break
        else:
            mismatch = "record"
    return ReplayReport(
        ok=not violations and mismatch is None,
        state=state,
        violations=violations,
        mismatch=mismatch,
    )
