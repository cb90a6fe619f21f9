"""The six primitive action templates and their precondition/effect semantics.

Every action is checked against the current interaction state before it is
applied, and application is a pure function producing the successor state.
The effect footprint of each template is fixed, so conformance can be
verified by diffing states: the families touched by apply() must stay
inside affected_features() for that template.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

from .state import (
    AgentId,
    EffectorId,
    EntityDeclarations,
    FeatureFamily,
    InteractionState,
    Location,
    ObjectId,
    StateError,
    reachable,
)

# Euclidean slack allowed between an effector and the object it grasps.
GRASP_TOLERANCE_M = 0.02

ROBOT_CAPABILITIES = frozenset({"grasp", "release", "move", "perceive", "wait"})
ALL_CAPABILITIES = ROBOT_CAPABILITIES | {"manipulate"}


class ActionTemplate(Enum):
    GRASP = "grasp"
    RELEASE = "release"
    MOVE = "move"
    MANIPULATE = "manipulate"
    WAIT = "wait"
    PERCEIVE = "perceive"


class PerceiveKind(Enum):
    CHECK_AVAILABLE_OBJECTS = "check_available_objects"
    PRECISE_MARKER_DETECTION = "precise_marker_detection"
    DETECT_EMPTY_BOX = "detect_empty_box"
    DETECT_TOOL_PULLING = "detect_tool_pulling"
    DETECT_IDLE = "detect_idle"


WAIT_CONDITION_NAMES = frozenset(
    {"pull_signal", "human_idle", "box_empty", "object_available"}
)


class ActionError(ValueError):
    """Raised for malformed actions (missing or inconsistent fields)."""


@dataclass(frozen=True)
class WaitCondition:
    """Named predicate the simulator resolves while the agent blocks."""

    name: str
    object: ObjectId | None = None

    def __post_init__(self) -> None:
        if self.name not in WAIT_CONDITION_NAMES:
            raise ActionError(f"unknown wait condition {self.name!r}")
        needs_object = self.name in {"box_empty", "object_available"}
        if needs_object and self.object is None:
            raise ActionError(f"wait condition {self.name!r} needs an object")
        if not needs_object and self.object is not None:
            raise ActionError(f"wait condition {self.name!r} takes no object")


class EffectorMode(Enum):
    """Whether a manipulation is done with a free hand or on a held object."""

    FREE = "free"
    HOLDING_OBJECT = "holding_object"


@dataclass(frozen=True)
class CharacteristicEdit:
    """Declarative trait change carried by a Manipulate action.

    The edit states its own prerequisites (effector mode, trait checks) so
    the precondition checker and the effect applier stay data-driven.
    """

    effector_mode: EffectorMode = EffectorMode.FREE
    require_not_grasped: bool = False
    require_content: bool = False
    set_assembled: bool | None = None
    content_delta: int = 0
    set_extras: tuple[tuple[str, str], ...] = ()
    clear_extras: tuple[str, ...] = ()
    internal_dof_delta: float = 0.0


# The edits exercised by the bundled domains. Names double as the tokens
# understood by the domain language.
EDITS: dict[str, CharacteristicEdit] = {
    "assemble": CharacteristicEdit(
        effector_mode=EffectorMode.HOLDING_OBJECT, set_assembled=True
    ),
    "fasten": CharacteristicEdit(
        effector_mode=EffectorMode.FREE, require_not_grasped=True, set_assembled=True
    ),
    "take_item": CharacteristicEdit(
        effector_mode=EffectorMode.FREE, require_content=True, content_delta=-1
    ),
}


@dataclass(frozen=True)
class PrimitiveAction:
    template: ActionTemplate
    agent: AgentId
    effector: EffectorId | None = None
    object: ObjectId | None = None
    target: Location | None = None
    perceive_kind: PerceiveKind | None = None
    wait_condition: WaitCondition | None = None
    manip_effect: CharacteristicEdit | None = None
    edit_name: str | None = None  # registry key when manip_effect came from EDITS

    def __post_init__(self) -> None:
        t = self.template
        if t in (ActionTemplate.GRASP, ActionTemplate.RELEASE):
            if self.effector is None or self.object is None:
                raise ActionError(f"{t.value} requires an effector and an object")
        elif t is ActionTemplate.MOVE:
            if self.target is None:
                raise ActionError("move requires a target location")
        elif t is ActionTemplate.MANIPULATE:
            if self.object is None or self.manip_effect is None:
                raise ActionError("manipulate requires an object and an effect")
        elif t is ActionTemplate.PERCEIVE:
            if self.perceive_kind is None:
                raise ActionError("perceive requires a perceive kind")
        elif t is ActionTemplate.WAIT:
            if self.wait_condition is None:
                raise ActionError("wait requires a wait condition")


@dataclass(frozen=True)
class Violation:
    """One failed check; capability failures carry no feature family."""

    code: str
    families: frozenset[FeatureFamily]
    message: str


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def families(self) -> frozenset[FeatureFamily]:
        out: set[FeatureFamily] = set()
        for v in self.violations:
            out |= v.families
        return frozenset(out)


class PreconditionError(ValueError):
    """apply() refused the action; the verdict explains why."""

    def __init__(self, action: PrimitiveAction, verdict: Verdict):
        self.action = action
        self.verdict = verdict
        summary = "; ".join(v.message for v in verdict.violations)
        super().__init__(f"{action.template.value} by {action.agent!r} refused: {summary}")


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _resolve_effector(action: PrimitiveAction, decl: EntityDeclarations) -> EffectorId:
    if action.effector is not None:
        return action.effector
    return decl.agent(action.agent).effectors[0]


def preconditions(
    action: PrimitiveAction, state: InteractionState, decl: EntityDeclarations
) -> Verdict:
    """Check the action against the state. Malformed references raise."""
    agent = decl.agent(action.agent)
    violations: list[Violation] = []
    if action.template.value not in agent.capabilities:
        violations.append(
            Violation(
                "capability",
                frozenset(),
                f"agent {action.agent!r} cannot {action.template.value}",
            )
        )

    t = action.template
    if t in (ActionTemplate.WAIT, ActionTemplate.PERCEIVE):
        return Verdict(tuple(violations))

    if t is ActionTemplate.MOVE:
        assert action.target is not None
        if not reachable(action.agent, action.target, decl):
            violations.append(
                Violation(
                    "unreachable",
                    frozenset(),
                    f"{action.target.region!r} outside reach of {action.agent!r}",
                )
            )
        return Verdict(tuple(violations))

    eff = _resolve_effector(action, decl)
    ref = (action.agent, eff)
    if ref not in state.effector_free:
        raise ActionError(f"agent {action.agent!r} has no effector {eff!r}")
    free = state.effector_free[ref]
    assert action.object is not None
    decl.object(action.object)
    traits = state.object_traits[action.object]

    if t is ActionTemplate.GRASP:
        if not free:
            violations.append(
                Violation(
                    "effector_busy",
                    frozenset({FeatureFamily.EFFECTORS}),
                    f"effector {ref} is not free",
                )
            )
        ee = state.agent_poses[action.agent].ee_pose[eff]
        obj_loc = state.object_poses[action.object].location
        if _distance(ee.coords, obj_loc.coords) > GRASP_TOLERANCE_M:
            violations.append(
                Violation(
                    "not_at_object",
                    frozenset({FeatureFamily.AGENT_POSE, FeatureFamily.OBJECT_POSE}),
                    f"effector {ref} is not at {action.object!r}",
                )
            )
        if traits.grasped_by:
            violations.append(
                Violation(
                    "already_grasped",
                    frozenset({FeatureFamily.OBJECT_TRAITS}),
                    f"{action.object!r} is already grasped",
                )
            )
    elif t is ActionTemplate.RELEASE:
        if free:
            violations.append(
                Violation(
                    "effector_empty",
                    frozenset({FeatureFamily.EFFECTORS}),
                    f"effector {ref} holds nothing",
                )
            )
        elif ref not in traits.grasped_by:
            # stricter than the raw effect table: releasing an object this
            # effector does not hold would desynchronize holder bookkeeping
            violations.append(
                Violation(
                    "holder_mismatch",
                    frozenset({FeatureFamily.OBJECT_TRAITS}),
                    f"effector {ref} does not hold {action.object!r}",
                )
            )
    elif t is ActionTemplate.MANIPULATE:
        edit = action.manip_effect
        assert edit is not None
        if edit.effector_mode is EffectorMode.HOLDING_OBJECT:
            if free:
                violations.append(
                    Violation(
                        "effector_empty",
                        frozenset({FeatureFamily.EFFECTORS}),
                        f"effector {ref} must hold {action.object!r}",
                    )
                )
            elif ref not in traits.grasped_by:
                violations.append(
                    Violation(
                        "holder_mismatch",
                        frozenset({FeatureFamily.EFFECTORS}),
                        f"effector {ref} holds a different object",
                    )
                )
        else:
            if not free:
                violations.append(
                    Violation(
                        "effector_busy",
                        frozenset({FeatureFamily.EFFECTORS}),
                        f"effector {ref} is not free",
                    )
                )
        obj_loc = state.object_poses[action.object].location
        if obj_loc.region not in agent.reach:
            violations.append(
                Violation(
                    "out_of_reach",
                    frozenset({FeatureFamily.OBJECT_POSE}),
                    f"{action.object!r} is outside reach of {action.agent!r}",
                )
            )
        if edit.require_not_grasped and traits.grasped_by:
            violations.append(
                Violation(
                    "grasped",
                    frozenset({FeatureFamily.OBJECT_TRAITS}),
                    f"{action.object!r} must not be grasped",
                )
            )
        if edit.require_content and not traits.content_count:
            violations.append(
                Violation(
                    "empty",
                    frozenset({FeatureFamily.OBJECT_TRAITS}),
                    f"{action.object!r} has no content left",
                )
            )
    return Verdict(tuple(violations))


def affected_features(
    template: ActionTemplate, holding: bool
) -> frozenset[FeatureFamily]:
    """Families a template is allowed to touch; Move grows OP when loaded."""
    if template in (ActionTemplate.GRASP, ActionTemplate.RELEASE):
        return frozenset(
            {
                FeatureFamily.EFFECTORS,
                FeatureFamily.AGENT_POSE,
                FeatureFamily.OBJECT_TRAITS,
            }
        )
    if template is ActionTemplate.MOVE:
        families = {FeatureFamily.AGENT_POSE}
        if holding:
            families.add(FeatureFamily.OBJECT_POSE)
        return frozenset(families)
    if template is ActionTemplate.MANIPULATE:
        return frozenset(
            {
                FeatureFamily.AGENT_POSE,
                FeatureFamily.OBJECT_POSE,
                FeatureFamily.OBJECT_TRAITS,
            }
        )
    return frozenset()


def action_record(action: PrimitiveAction) -> dict:
    """JSON-ready encoding used by plan export and the event log."""
    record: dict = {"template": action.template.value, "agent": action.agent}
    if action.effector is not None:
        record["effector"] = action.effector
    if action.object is not None:
        record["object"] = action.object
    if action.target is not None:
        record["target"] = {
            "region": action.target.region,
            "coords": list(action.target.coords),
        }
    if action.perceive_kind is not None:
        record["perceive_kind"] = action.perceive_kind.value
    if action.wait_condition is not None:
        wc: dict = {"name": action.wait_condition.name}
        if action.wait_condition.object is not None:
            wc["object"] = action.wait_condition.object
        record["wait_condition"] = wc
    if action.edit_name is not None:
        record["edit"] = action.edit_name
    return record


def action_from_record(record: dict) -> PrimitiveAction:
    """Inverse of action_record. Unknown keys are ignored."""
    target = None
    if "target" in record:
        target = Location(
            record["target"]["region"], tuple(record["target"]["coords"])
        )
    wait_condition = None
    if "wait_condition" in record:
        wc = record["wait_condition"]
        wait_condition = WaitCondition(wc["name"], wc.get("object"))
    edit_name = record.get("edit")
    manip_effect = EDITS[edit_name] if edit_name is not None else None
    return PrimitiveAction(
        template=ActionTemplate(record["template"]),
        agent=record["agent"],
        effector=record.get("effector"),
        object=record.get("object"),
        target=target,
        perceive_kind=(
            PerceiveKind(record["perceive_kind"])
            if "perceive_kind" in record
            else None
        ),
        wait_condition=wait_condition,
        manip_effect=manip_effect,
        edit_name=edit_name,
    )


def _set_extras(extras: dict[str, str], edit: CharacteristicEdit) -> dict[str, str]:
    out = dict(extras)
    for key in edit.clear_extras:
        out.pop(key, None)
    for key, value in edit.set_extras:
        out[key] = value
    return out


def apply(
    action: PrimitiveAction,
    state: InteractionState,
    decl: EntityDeclarations,
    duration: float = 0.0,
) -> InteractionState:
    """Apply the action, returning the successor state.

    Raises PreconditionError when the verdict is not ok. The clock always
    advances by the given duration, including for Wait and Perceive.
    """
    verdict = preconditions(action, state, decl)
    if not verdict.ok:
        raise PreconditionError(action, verdict)

    clock = state.clock + duration
    t = action.template
    if t in (ActionTemplate.WAIT, ActionTemplate.PERCEIVE):
        return state.with_clock(clock)

    if t is ActionTemplate.MOVE:
        assert action.target is not None
        eff = _resolve_effector(action, decl)
        ref = (action.agent, eff)
        was_loaded = not state.effector_free[ref]
        pose = state.agent_poses[action.agent]
        agent_poses = state.agent_poses | {
            action.agent: replace(pose, ee_pose=pose.ee_pose | {eff: action.target})
        }
        object_poses = state.object_poses
        if was_loaded:
            held = state.held_object(action.agent, eff)
            if held is None:
                raise StateError(
                    f"effector {ref} is marked loaded but no holder is recorded"
                )
            object_poses = object_poses | {
                held: replace(object_poses[held], location=action.target)
            }
        return replace(
            state, agent_poses=agent_poses, object_poses=object_poses, clock=clock
        )

    eff = _resolve_effector(action, decl)
    ref = (action.agent, eff)
    assert action.object is not None
    obj = action.object
    traits = state.object_traits[obj]
    pose = state.agent_poses[action.agent]

    if t is ActionTemplate.GRASP:
        return replace(
            state,
            effector_free=state.effector_free | {ref: False},
            agent_poses=state.agent_poses
            | {
                action.agent: replace(
                    pose, gripper_opening=pose.gripper_opening | {eff: 0.0}
                )
            },
            object_traits=state.object_traits
            | {
                obj: replace(
                    traits,
                    grasped_by=traits.grasped_by | {ref},
                    extras=dict(traits.extras) | {"grasped": "true"},
                )
            },
            clock=clock,
        )

    if t is ActionTemplate.RELEASE:
        holders = traits.grasped_by - {ref}
        extras = dict(traits.extras)
        # flag follows the holder set; during a handover the partner still holds
        extras["grasped"] = "true" if holders else "false"
        return replace(
            state,
            effector_free=state.effector_free | {ref: True},
            agent_poses=state.agent_poses
            | {
                action.agent: replace(
                    pose, gripper_opening=pose.gripper_opening | {eff: 1.0}
                )
            },
            object_traits=state.object_traits
            | {obj: replace(traits, grasped_by=holders, extras=extras)},
            clock=clock,
        )

    # Manipulate: the hand works at the object, traits change per the edit
    edit = action.manip_effect
    assert edit is not None
    obj_pose = state.object_poses[obj]
    new_traits = replace(
        traits,
        assembled=traits.assembled if edit.set_assembled is None else edit.set_assembled,
        content_count=(
            None
            if traits.content_count is None
            else traits.content_count + edit.content_delta
        ),
        extras=_set_extras(traits.extras, edit),
    )
    object_poses = state.object_poses
    if edit.internal_dof_delta:
        current = obj_pose.internal_dof or 0.0
        object_poses = object_poses | {
            obj: replace(obj_pose, internal_dof=current + edit.internal_dof_delta)
        }
    agent_poses = state.agent_poses | {
        action.agent: replace(pose, ee_pose=pose.ee_pose | {eff: obj_pose.location})
    }
    return replace(
        state,
        agent_poses=agent_poses,
        object_poses=object_poses,
        object_traits=state.object_traits | {obj: new_traits},
        clock=clock,
    )
