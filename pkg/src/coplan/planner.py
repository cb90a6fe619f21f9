"""Ordered HTN planner.

Compound tasks decompose through methods tried strictly in declaration
order; primitives are checked and applied through the action core so the
planner always threads a concrete simulated state. The search is
depth-first with full backtracking, implemented iteratively so deep
decompositions never hit the interpreter recursion limit. A trace of the
chosen methods is kept with every plan, from which the decomposition tree
is rebuilt on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .actions import (
    EDITS,
    ActionTemplate,
    PerceiveKind,
    PrimitiveAction,
    Verdict,
    WaitCondition,
    apply,
    preconditions,
)
from .state import (
    AgentId,
    AgentKind,
    EntityDeclarations,
    InteractionState,
    Location,
)

PRIMITIVE_NAMES = frozenset(t.value for t in ActionTemplate)

# Decompositions nested deeper than this are treated as ill-formed (usually
# a method that recurses without consuming anything).
MAX_DECOMPOSITION_DEPTH = 10_000
# Iteration ceiling for one planning call. Successful decompositions stay
# far below it; a doomed search over an unplannable state must fail in
# bounded time instead of exhausting the method tree.
MAX_SEARCH_EXPANSIONS = 400_000


class DomainError(ValueError):
    """Malformed domain: bad arity, unknown name, missing method."""


@dataclass(frozen=True)
class TargetRef:
    """A move destination written as region(x, y) in a method body."""

    region: str
    coords: tuple[float, float]


Arg = str | TargetRef


@dataclass(frozen=True)
class TaskCall:
    name: str
    args: tuple[Arg, ...] = ()

    @property
    def primitive(self) -> bool:
        return self.name in PRIMITIVE_NAMES

    def format(self) -> str:
        parts = []
        for a in self.args:
            if isinstance(a, TargetRef):
                parts.append(f"{a.region}({a.coords[0]}, {a.coords[1]})")
            else:
                parts.append(a)
        return f"{self.name}({', '.join(parts)})"


@dataclass(frozen=True)
class Predicate:
    """State test usable in method preconditions."""

    name: str
    args: tuple[str, ...]
    negated: bool = False

    def format(self) -> str:
        inner = f"{self.name}({', '.join(self.args)})"
        return f"not {inner}" if self.negated else inner


@dataclass(frozen=True)
class Method:
    task: str
    params: tuple[str, ...]
    preconditions: tuple[Predicate, ...]
    subtasks: tuple[TaskCall, ...]


@dataclass(frozen=True)
class Domain:
    name: str
    declarations: EntityDeclarations
    methods: dict[str, tuple[Method, ...]]
    goal: TaskCall

    @property
    def component_count(self) -> int:
        return sum(1 for o in self.declarations.objects if o.kind == "component")

    @property
    def default_robot(self) -> AgentId:
        for agent in self.declarations.agents:
            if agent.kind is AgentKind.ROBOT:
                return agent.name
        raise DomainError(f"domain {self.name!r} declares no robot")


@dataclass(frozen=True)
class Plan:
    steps: tuple[PrimitiveAction, ...]
    trace: tuple["TraceEntry", ...]

    def __len__(self) -> int:
        return len(self.steps)

    def export(self) -> list[dict]:
        from .actions import action_record

        return [
            {"index": i} | action_record(a) for i, a in enumerate(self.steps)
        ]


@dataclass(frozen=True)
class TraceEntry:
    """Pre-order record of one decomposition choice or emitted step."""

    kind: str  # "method" | "leaf"
    task: TaskCall
    method_index: int = 0
    subtask_count: int = 0
    action: PrimitiveAction | None = None


@dataclass(frozen=True)
class TreeNode:
    task: TaskCall
    method_label: str | None  # None on leaves
    action: PrimitiveAction | None  # None on internal nodes
    children: tuple["TreeNode", ...] = ()

    @property
    def leaf(self) -> bool:
        return self.action is not None

    def leaves(self) -> list["TreeNode"]:
        if self.leaf:
            return [self]
        out: list[TreeNode] = []
        for child in self.children:
            out.extend(child.leaves())
        return out


class PlanningError(Exception):
    """No decomposition exists; reports the deepest failure frontier."""

    def __init__(
        self,
        message: str,
        task: TaskCall | None = None,
        step_index: int = 0,
        verdict: Verdict | None = None,
        predicate: Predicate | None = None,
    ):
        super().__init__(message)
        self.task = task
        self.step_index = step_index
        self.verdict = verdict
        self.predicate = predicate


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    failed_index: int | None = None
    verdict: Verdict | None = None


def eval_predicate(
    pred: Predicate, state: InteractionState, decl: EntityDeclarations
) -> bool:
    name, args = pred.name, pred.args
    try:
        if name == "at":
            obj, region = args
            decl.region(region)
            value = state.object_poses[obj].location.region == region
        elif name == "assembled":
            (obj,) = args
            value = state.object_traits[obj].assembled
        elif name == "grasped":
            (obj,) = args
            value = bool(state.object_traits[obj].grasped_by)
        elif name == "holding":
            agent, eff, obj = args
            value = (agent, eff) in state.object_traits[obj].grasped_by
        elif name == "free":
            agent, eff = args
            value = state.effector_free[(agent, eff)]
        elif name == "empty":
            (obj,) = args
            value = state.object_traits[obj].content_count == 0
        else:
            raise DomainError(f"unknown predicate {name!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise DomainError(f"bad predicate {pred.format()}: {exc}") from None
    return not value if pred.negated else value


def _substitute(call: TaskCall, binding: dict[str, Arg]) -> TaskCall:
    return TaskCall(
        call.name, tuple(binding.get(a, a) if isinstance(a, str) else a for a in call.args)
    )


def _bind_predicate(pred: Predicate, binding: dict[str, Arg]) -> Predicate:
    args = []
    for a in pred.args:
        bound = binding.get(a, a)
        if isinstance(bound, TargetRef):
            raise DomainError(f"predicate {pred.name!r} given a location argument")
        args.append(bound)
    return replace(pred, args=tuple(args))


def _ground_move_target(
    token: Arg, state: InteractionState, decl: EntityDeclarations
) -> Location:
    if isinstance(token, TargetRef):
        region = decl.region(token.region)
        if not region.contains(token.coords):
            raise DomainError(
                f"move target {token.coords} outside region {token.region!r}"
            )
        return Location(token.region, token.coords)
    if token in decl.object_map:
        return state.object_poses[token].location
    if token in decl.region_map:
        return decl.region_location(token)
    raise DomainError(f"move target {token!r} is neither an object nor a region")


def ground_primitive(
    call: TaskCall, state: InteractionState, domain: Domain
) -> PrimitiveAction:
    """Turn a fully-bound primitive task call into a concrete action."""
    decl = domain.declarations
    name = call.name
    args = call.args

    def require_strings() -> tuple[str, ...]:
        if any(isinstance(a, TargetRef) for a in args):
            raise DomainError(f"{name} does not take a location literal")
        return tuple(a for a in args if isinstance(a, str))

    if name in ("grasp", "release"):
        agent, eff, obj = _arity(call, require_strings(), 3)
        template = ActionTemplate.GRASP if name == "grasp" else ActionTemplate.RELEASE
        return PrimitiveAction(template, agent, eff, obj)
    if name == "move":
        if len(args) != 3:
            raise DomainError(f"move expects 3 arguments, got {call.format()}")
        agent, eff = args[0], args[1]
        if not isinstance(agent, str) or not isinstance(eff, str):
            raise DomainError(f"bad move agent/effector in {call.format()}")
        target = _ground_move_target(args[2], state, decl)
        return PrimitiveAction(ActionTemplate.MOVE, agent, eff, target=target)
    if name == "manipulate":
        str_args = require_strings()
        if len(str_args) == 3:
            agent, obj, edit_name = str_args
            eff = decl.agent(agent).effectors[0]
        elif len(str_args) == 4:
            agent, eff, obj, edit_name = str_args
        else:
            raise DomainError(f"manipulate expects 3 or 4 arguments: {call.format()}")
        if edit_name not in EDITS:
            raise DomainError(f"unknown manipulation {edit_name!r}")
        return PrimitiveAction(
            ActionTemplate.MANIPULATE,
            agent,
            eff,
            obj,
            manip_effect=EDITS[edit_name],
            edit_name=edit_name,
        )
    if name == "perceive":
        str_args = require_strings()
        agent = domain.default_robot
        if len(str_args) == 2:
            agent, kind_token = str_args
        elif len(str_args) == 1:
            (kind_token,) = str_args
        else:
            raise DomainError(f"perceive expects 1 or 2 arguments: {call.format()}")
        try:
            kind = PerceiveKind(kind_token)
        except ValueError:
            raise DomainError(f"unknown perceive kind {kind_token!r}") from None
        return PrimitiveAction(ActionTemplate.PERCEIVE, agent, perceive_kind=kind)
    if name == "wait":
        str_args = list(require_strings())
        agent = domain.default_robot
        if str_args and str_args[0] in decl.agent_map:
            agent = str_args.pop(0)
        if len(str_args) == 1:
            condition = WaitCondition(str_args[0])
        elif len(str_args) == 2:
            condition = WaitCondition(str_args[0], str_args[1])
        else:
            raise DomainError(f"wait expects a condition: {call.format()}")
        return PrimitiveAction(ActionTemplate.WAIT, agent, wait_condition=condition)
    raise DomainError(f"unknown primitive {name!r}")


def _arity(call: TaskCall, args: tuple[str, ...], n: int) -> tuple[str, ...]:
    if len(args) != n:
        raise DomainError(f"{call.name} expects {n} arguments, got {call.format()}")
    return args


@dataclass
class _Frame:
    """Choice point: resume trying methods for `task` from `next_method`."""

    todo: tuple[tuple[TaskCall, int], ...]
    state: InteractionState
    steps_len: int
    trace_len: int
    task: TaskCall
    depth: int
    next_method: int


@dataclass
class _Failure:
    prefix_len: int = -1
    task: TaskCall | None = None
    verdict: Verdict | None = None
    predicate: Predicate | None = None

    def note_action(self, prefix: int, task: TaskCall, verdict: Verdict) -> None:
        if prefix > self.prefix_len:
            self.prefix_len, self.task, self.verdict, self.predicate = (
                prefix,
                task,
                verdict,
                None,
            )

    def note_method(self, prefix: int, task: TaskCall, pred: Predicate | None) -> None:
        if prefix > self.prefix_len:
            self.prefix_len, self.task, self.verdict, self.predicate = (
                prefix,
                task,
                None,
                pred,
            )

    def to_error(self) -> PlanningError:
        if self.task is None:
            return PlanningError("planning failed: empty goal frontier")
        if self.verdict is not None:
            why = "; ".join(
                f"{v.message} [{'/'.join(sorted(f.value for f in v.families)) or 'capability'}]"
                for v in self.verdict.violations
            )
        elif self.predicate is not None:
            why = f"no method applicable, last unsatisfied: {self.predicate.format()}"
        else:
            why = "no method applicable"
        return PlanningError(
            f"no decomposition found; deepest failure after "
            f"{self.prefix_len} step(s) at {self.task.format()}: {why}",
            task=self.task,
            step_index=self.prefix_len,
            verdict=self.verdict,
            predicate=self.predicate,
        )


def _applicable_method(
    methods: tuple[Method, ...],
    start: int,
    task: TaskCall,
    state: InteractionState,
    decl: EntityDeclarations,
) -> tuple[int, Method, dict[str, Arg]] | Predicate | None:
    """First applicable method at or after `start`.

    Returns (index, method, binding) on success, the last predicate that
    failed if some method matched arity but none applied, else None.
    """
    last_failed: Predicate | None = None
    for idx in range(start, len(methods)):
        m = methods[idx]
        if len(m.params) != len(task.args):
            continue
        binding = dict(zip(m.params, task.args))
        failed = None
        for pred in m.preconditions:
            if not eval_predicate(_bind_predicate(pred, binding), state, decl):
                failed = pred
                break
        if failed is None:
            return idx, m, binding
        last_failed = failed
    return last_failed


def plan(domain: Domain, state: InteractionState, goal: TaskCall | None = None) -> Plan:
    """Decompose the goal task into a totally ordered primitive plan.

    Deterministic: methods are tried in declaration order and the first
    applicable one is committed (with backtracking on downstream failure).
    """
    decl = domain.declarations
    root = goal if goal is not None else domain.goal
    todo: tuple[tuple[TaskCall, int], ...] = ((root, 0),)
    steps: list[PrimitiveAction] = []
    trace: list[TraceEntry] = []
    stack: list[_Frame] = []
    failure = _Failure()

    def backtrack() -> bool:
        nonlocal todo, current_state
        while stack:
            frame = stack.pop()
            del steps[frame.steps_len :]
            del trace[frame.trace_len :]
            methods = domain.methods[frame.task.name]
            found = _applicable_method(
                methods, frame.next_method, frame.task, frame.state, decl
            )
            if isinstance(found, tuple):
                idx, method, binding = found
                _commit(frame.todo, frame.state, frame.task, frame.depth, idx, method, binding)
                return True
            failure.note_method(
                frame.steps_len,
                frame.task,
                found if isinstance(found, Predicate) else None,
            )
        return False

    def _commit(
        at_todo: tuple[tuple[TaskCall, int], ...],
        at_state: InteractionState,
        task: TaskCall,
        depth: int,
        idx: int,
        method: Method,
        binding: dict[str, Arg],
    ) -> None:
        nonlocal todo, current_state
        if idx + 1 < len(domain.methods[task.name]):
            stack.append(
                _Frame(at_todo, at_state, len(steps), len(trace), task, depth, idx + 1)
            )
        trace.append(
            TraceEntry("method", task, method_index=idx, subtask_count=len(method.subtasks))
        )
        expanded = tuple(
            (_substitute(sub, binding), depth + 1) for sub in method.subtasks
        )
        todo = expanded + at_todo[1:]
        current_state = at_state

    current_state = state
    expansions = 0
    while todo:
        expansions += 1
        if expansions > MAX_SEARCH_EXPANSIONS:
            raise PlanningError(
                f"search budget of {MAX_SEARCH_EXPANSIONS} expansions exhausted; "
                f"deepest failure so far: {failure.to_error()}",
            )
        task, depth = todo[0]
        if depth > MAX_DECOMPOSITION_DEPTH:
            raise PlanningError(
                f"decomposition depth exceeded {MAX_DECOMPOSITION_DEPTH} at {task.format()}",
                task=task,
            )
        if task.primitive:
            action = ground_primitive(task, current_state, domain)
            verdict = preconditions(action, current_state, decl)
            if verdict.ok:
                current_state = apply(action, current_state, decl, 0.0)
                steps.append(action)
                trace.append(TraceEntry("leaf", task, action=action))
                todo = todo[1:]
                continue
            failure.note_action(len(steps), task, verdict)
            if not backtrack():
                raise failure.to_error()
            continue
        methods = domain.methods.get(task.name)
        if not methods:
            raise DomainError(f"no methods for compound task {task.name!r}")
        found = _applicable_method(methods, 0, task, current_state, decl)
        if isinstance(found, tuple):
            idx, method, binding = found
            _commit(todo, current_state, task, depth, idx, method, binding)
            continue
        failure.note_method(
            len(steps), task, found if isinstance(found, Predicate) else None
        )
        if not backtrack():
            raise failure.to_error()
    return Plan(steps=tuple(steps), trace=tuple(trace))


def replan(
    domain: Domain, current: InteractionState, remaining: TaskCall | None = None
) -> Plan:
    """Plan the (remaining) goal from an arbitrary reachable state."""
    return plan(domain, current, goal=remaining)


def validate(
    plan_: Plan, state: InteractionState, domain: Domain
) -> ValidationResult:
    """Forward-simulate the plan; report the first step that fails."""
    decl = domain.declarations
    current = state
    for i, action in enumerate(plan_.steps):
        verdict = preconditions(action, current, decl)
        if not verdict.ok:
            return ValidationResult(False, failed_index=i, verdict=verdict)
        current = apply(action, current, decl, 0.0)
    return ValidationResult(True)


def explain(plan_: Plan) -> TreeNode:
    """Rebuild the decomposition tree from the plan's pre-order trace."""
    if not plan_.trace:
        raise PlanningError("plan has no provenance trace")
    pos = 0

    def build() -> TreeNode:
        nonlocal pos
        entry = plan_.trace[pos]
        pos += 1
        if entry.kind == "leaf":
            return TreeNode(task=entry.task, method_label=None, action=entry.action)
        children = tuple(build() for _ in range(entry.subtask_count))
        label = f"{entry.task.name}[{entry.method_index}]"
        return TreeNode(task=entry.task, method_label=label, action=None, children=children)

    root = build()
    if pos != len(plan_.trace):
        raise PlanningError("trailing provenance entries")
    return root
