"""Textual domain-definition language (.htn files).

A domain file declares the workspace regions, the agents with their
capabilities, the objects, a goal task, and the method library. The
serializer emits a canonical form: parsing its output and serializing
again reproduces the same bytes, which keeps the bundled files diffable
and lets golden tests compare raw text.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .actions import EDITS, ActionTemplate, PerceiveKind
from .planner import (
    Domain,
    Method,
    Predicate,
    PRIMITIVE_NAMES,
    TargetRef,
    TaskCall,
)
from .state import (
    AgentDecl,
    AgentKind,
    DeclarationError,
    EntityDeclarations,
    Location,
    ObjectDecl,
    Region,
)

BUNDLED_DOMAINS = ("hand_over_micro", "kritter", "ragrund", "hutten", "oddvar")

_CAP_ORDER = ("grasp", "release", "move", "manipulate", "perceive", "wait")
_TEMPLATES = frozenset(t.value for t in ActionTemplate)
_PERCEIVE_TOKENS = frozenset(k.value for k in PerceiveKind)
_WAIT_TOKENS = frozenset({"pull_signal", "human_idle", "box_empty", "object_available"})
_OBJECT_WAITS = ("box_empty", "object_available")

_KEYWORDS = frozenset(
    {
        "domain",
        "regions",
        "agents",
        "objects",
        "goal",
        "method",
        "pre",
        "not",
        "at",
        "kind",
        "content",
        "hidden",
        "robot",
        "human",
        "caps",
        "reach",
        "effectors",
    }
)


@dataclass(frozen=True)
class DomainSource:
    text: str
    origin: str = "<string>"


class ParseError(ValueError):
    def __init__(
        self,
        message: str,
        line: int,
        column: int,
        expected: tuple[str, ...] = (),
        origin: str = "<string>",
    ):
        self.line = line
        self.column = column
        self.expected = expected
        self.origin = origin
        hint = f" (expected {', '.join(expected)})" if expected else ""
        super().__init__(f"{origin}:{line}:{column}: {message}{hint}")


class SemanticError(ParseError):
    """Well-formed syntax that violates a domain rule."""


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT NUMBER STRING punct-kinds EOF
    value: str
    line: int
    column: int


_PUNCT = {
    "{": "LBRACE",
    "}": "RBRACE",
    "(": "LPAREN",
    ")": "RPAREN",
    "[": "LBRACKET",
    "]": "RBRACKET",
    ",": "COMMA",
    ";": "SEMI",
}


def _lex(text: str, origin: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if ch in _PUNCT:
            tokens.append(_Token(_PUNCT[ch], ch, line, start_col))
            i += 1
            col += 1
            continue
        if ch == '"':
            j = i + 1
            while j < n and text[j] not in '"\n':
                j += 1
            if j >= n or text[j] != '"':
                raise ParseError("unterminated string", line, start_col, origin=origin)
            tokens.append(_Token("STRING", text[i + 1 : j], line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and (text[i + 1].isdigit() or text[i + 1] == ".")) or ch == ".":
            j = i
            if text[j] == "-":
                j += 1
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            word = text[i:j]
            try:
                float(word)
            except ValueError:
                raise ParseError(
                    f"bad number {word!r}", line, start_col, origin=origin
                ) from None
            tokens.append(_Token("NUMBER", word, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("IDENT", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", line, start_col, origin=origin)
    tokens.append(_Token("EOF", "", line, col))
    return tokens


@dataclass
class _ObjectStmt:
    name: str
    region: str
    coords: tuple[float, float] | None
    kind: str
    content: int | None
    token: _Token


class _Parser:
    def __init__(self, text: str, origin: str):
        self.origin = origin
        self.tokens = _lex(text, origin)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def fail(self, message: str, tok: _Token, expected: tuple[str, ...] = ()):
        raise ParseError(
            message, tok.line, tok.column, expected=expected, origin=self.origin
        )

    def expect(self, kind: str, value: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind.lower()
            self.fail(
                f"unexpected {tok.value!r}" if tok.kind != "EOF" else "unexpected end of input",
                tok,
                expected=(want,),
            )
        return self.next()

    def accept(self, kind: str, value: str | None = None) -> _Token | None:
        tok = self.peek()
        if tok.kind == kind and (value is None or tok.value == value):
            return self.next()
        return None

    # --- grammar -----------------------------------------------------------

    def parse_domain(self) -> Domain:
        self.expect("IDENT", "domain")
        name = self.expect("STRING").value
        self.expect("LBRACE")
        regions: list[tuple[Region, _Token]] = []
        agents: list[tuple[AgentDecl, _Token]] = []
        objects: list[_ObjectStmt] = []
        goal: tuple[TaskCall, _Token] | None = None
        methods: list[tuple[Method, _Token]] = []
        while not self.accept("RBRACE"):
            tok = self.peek()
            if tok.kind == "EOF":
                self.fail("unexpected end of input", tok, expected=("}",))
            if tok.kind != "IDENT":
                self.fail(f"unexpected {tok.value!r}", tok, expected=("section",))
            if tok.value == "regions":
                regions.extend(self.parse_regions())
            elif tok.value == "agents":
                agents.extend(self.parse_agents())
            elif tok.value == "objects":
                objects.extend(self.parse_objects())
            elif tok.value == "goal":
                if goal is not None:
                    self.fail("duplicate goal", tok)
                self.next()
                goal = (self.parse_goal_call(), tok)
            elif tok.value == "method":
                methods.append(self.parse_method())
            else:
                self.fail(
                    f"unknown section {tok.value!r}",
                    tok,
                    expected=("regions", "agents", "objects", "goal", "method"),
                )
        self.expect("EOF")
        return _build(name, regions, agents, objects, goal, methods, self.origin)

    def parse_regions(self) -> list[tuple[Region, _Token]]:
        self.expect("IDENT", "regions")
        self.expect("LBRACE")
        out = []
        while not self.accept("RBRACE"):
            tok = self.name_token()
            self.expect("LPAREN")
            bounds = (self.number(), self.comma_number(), self.comma_number(), self.comma_number())
            self.expect("RPAREN")
            visible = self.accept("IDENT", "hidden") is None
            try:
                region = Region(tok.value, bounds, visible)
            except DeclarationError as exc:
                raise SemanticError(str(exc), tok.line, tok.column, origin=self.origin)
            out.append((region, tok))
        return out

    def parse_agents(self) -> list[tuple[AgentDecl, _Token]]:
        self.expect("IDENT", "agents")
        self.expect("LBRACE")
        out = []
        while not self.accept("RBRACE"):
            tok = self.name_token()
            kind_tok = self.expect("IDENT")
            if kind_tok.value not in ("robot", "human"):
                self.fail(
                    f"unknown agent kind {kind_tok.value!r}",
                    kind_tok,
                    expected=("robot", "human"),
                )
            self.expect("IDENT", "caps")
            caps_tok = self.peek()
            caps = self.ident_list()
            for cap in caps:
                if cap not in _TEMPLATES:
                    raise SemanticError(
                        f"unknown template {cap!r}",
                        caps_tok.line,
                        caps_tok.column,
                        origin=self.origin,
                    )
            if not caps:
                raise SemanticError(
                    "empty capability list", caps_tok.line, caps_tok.column, origin=self.origin
                )
            self.expect("IDENT", "reach")
            reach = self.ident_list()
            self.expect("IDENT", "effectors")
            eff_tok = self.peek()
            effectors = self.ident_list()
            try:
                agent = AgentDecl(
                    tok.value,
                    AgentKind(kind_tok.value),
                    tuple(effectors),
                    frozenset(reach),
                    frozenset(caps),
                )
            except DeclarationError as exc:
                raise SemanticError(str(exc), eff_tok.line, eff_tok.column, origin=self.origin)
            out.append((agent, tok))
        return out

    def parse_objects(self) -> list[_ObjectStmt]:
        self.expect("IDENT", "objects")
        self.expect("LBRACE")
        out = []
        while not self.accept("RBRACE"):
            tok = self.name_token()
            self.expect("IDENT", "at")
            region = self.expect("IDENT").value
            coords = None
            if self.accept("LPAREN"):
                coords = (self.number(), self.comma_number())
                self.expect("RPAREN")
            kind = "component"
            if self.accept("IDENT", "kind"):
                kind = self.expect("IDENT").value
            content = None
            if self.accept("IDENT", "content"):
                num_tok = self.expect("NUMBER")
                value = float(num_tok.value)
                if value != int(value) or value < 0:
                    self.fail("content must be a non-negative integer", num_tok)
                content = int(value)
            out.append(_ObjectStmt(tok.value, region, coords, kind, content, tok))
        return out

    def parse_goal_call(self) -> TaskCall:
        name = self.expect("IDENT")
        self.expect("LPAREN")
        args: list[str] = []
        if not self.accept("RPAREN"):
            args.append(self.expect("IDENT").value)
            while self.accept("COMMA"):
                args.append(self.expect("IDENT").value)
            self.expect("RPAREN")
        return TaskCall(name.value, tuple(args))

    def parse_method(self) -> tuple[Method, _Token]:
        self.expect("IDENT", "method")
        tok = self.name_token(allow_primitive=False)
        self.expect("LPAREN")
        params: list[str] = []
        if not self.accept("RPAREN"):
            params.append(self.expect("IDENT").value)
            while self.accept("COMMA"):
                params.append(self.expect("IDENT").value)
            self.expect("RPAREN")
        if len(set(params)) != len(params):
            raise SemanticError(
                f"duplicate parameter in method {tok.value!r}",
                tok.line,
                tok.column,
                origin=self.origin,
            )
        preconditions: list[Predicate] = []
        if self.accept("IDENT", "pre"):
            self.expect("LBRACKET")
            if not self.accept("RBRACKET"):
                preconditions.append(self.parse_predicate())
                while self.accept("COMMA"):
                    preconditions.append(self.parse_predicate())
                self.expect("RBRACKET")
        self.expect("LBRACE")
        subtasks: list[TaskCall] = []
        while not self.accept("RBRACE"):
            if self.peek().kind == "EOF":
                self.fail("unexpected end of input", self.peek(), expected=("}",))
            subtasks.append(self.parse_subtask())
            self.expect("SEMI")
        method = Method(tok.value, tuple(params), tuple(preconditions), tuple(subtasks))
        return method, tok

    def parse_predicate(self) -> Predicate:
        negated = self.accept("IDENT", "not") is not None
        name = self.expect("IDENT")
        self.expect("LPAREN")
        args: list[str] = []
        if not self.accept("RPAREN"):
            args.append(self.expect("IDENT").value)
            while self.accept("COMMA"):
                args.append(self.expect("IDENT").value)
            self.expect("RPAREN")
        return Predicate(name.value, tuple(args), negated)

    def parse_subtask(self) -> TaskCall:
        name = self.expect("IDENT")
        if name.value in _KEYWORDS:
            self.fail(f"reserved word {name.value!r}", name)
        self.expect("LPAREN")
        args: list = []
        if not self.accept("RPAREN"):
            args.append(self.parse_call_arg())
            while self.accept("COMMA"):
                args.append(self.parse_call_arg())
            self.expect("RPAREN")
        return TaskCall(name.value, tuple(args))

    def parse_call_arg(self):
        tok = self.expect("IDENT")
        if not self.accept("LPAREN"):
            return tok.value
        if self.peek().kind == "NUMBER":
            coords = (self.number(), self.comma_number())
            self.expect("RPAREN")
            return TargetRef(tok.value, coords)
        # nested condition call flattens: box_empty(b) -> box_empty, b
        inner = self.expect("IDENT").value
        self.expect("RPAREN")
        return _Nested(tok.value, inner)

    def name_token(self, allow_primitive: bool = True) -> _Token:
        tok = self.expect("IDENT")
        if tok.value in _KEYWORDS:
            raise SemanticError(
                f"reserved word {tok.value!r} cannot be a name",
                tok.line,
                tok.column,
                origin=self.origin,
            )
        if not allow_primitive and tok.value in PRIMITIVE_NAMES:
            raise SemanticError(
                f"{tok.value!r} is a primitive and cannot have methods",
                tok.line,
                tok.column,
                origin=self.origin,
            )
        return tok

    def ident_list(self) -> list[str]:
        self.expect("LBRACKET")
        out: list[str] = []
        if not self.accept("RBRACKET"):
            out.append(self.expect("IDENT").value)
            while self.accept("COMMA"):
                out.append(self.expect("IDENT").value)
            self.expect("RBRACKET")
        return out

    def number(self) -> float:
        return float(self.expect("NUMBER").value)

    def comma_number(self) -> float:
        self.expect("COMMA")
        return self.number()


@dataclass(frozen=True)
class _Nested:
    """Flattened nested call argument, e.g. box_empty(b1)."""

    head: str
    inner: str


def _flatten_args(call: TaskCall) -> TaskCall:
    args: list = []
    for a in call.args:
        if isinstance(a, _Nested):
            args.extend([a.head, a.inner])
        else:
            args.append(a)
    return TaskCall(call.name, tuple(args))


def _build(
    name: str,
    regions: list[tuple[Region, _Token]],
    agents: list[tuple[AgentDecl, _Token]],
    objects: list[_ObjectStmt],
    goal: tuple[TaskCall, _Token] | None,
    methods: list[tuple[Method, _Token]],
    origin: str,
) -> Domain:
    def err(message: str, tok: _Token) -> SemanticError:
        return SemanticError(message, tok.line, tok.column, origin=origin)

    region_map = {r.name: r for r, _ in regions}
    seen: dict[str, _Token] = {}
    for r, tok in regions:
        if r.name in seen:
            raise err(f"duplicate identifier {r.name!r}", tok)
        seen[r.name] = tok
    for a, tok in agents:
        if a.name in seen:
            raise err(f"duplicate identifier {a.name!r}", tok)
        seen[a.name] = tok
    obj_decls: list[ObjectDecl] = []
    for stmt in objects:
        if stmt.name in seen:
            raise err(f"duplicate identifier {stmt.name!r}", stmt.token)
        seen[stmt.name] = stmt.token
        region = region_map.get(stmt.region)
        if region is None:
            raise err(f"undeclared region {stmt.region!r}", stmt.token)
        coords = stmt.coords if stmt.coords is not None else region.center
        try:
            obj_decls.append(
                ObjectDecl(stmt.name, Location(stmt.region, coords), stmt.kind, stmt.content)
            )
        except DeclarationError as exc:
            raise err(str(exc), stmt.token)

    try:
        decl = EntityDeclarations(
            tuple(r for r, _ in regions),
            tuple(a for a, _ in agents),
            tuple(obj_decls),
        )
    except DeclarationError as exc:
        tok = goal[1] if goal else _Token("EOF", "", 1, 1)
        raise err(str(exc), objects[0].token if objects else tok)

    if goal is None:
        raise SemanticError("missing goal", 1, 1, origin=origin)
    goal_call, goal_tok = goal

    method_map: dict[str, list[Method]] = {}
    for m, tok in methods:
        method_map.setdefault(m.task, []).append(m)

    agent_names = set(decl.agent_map)
    effector_names = {e for a in decl.agents for e in a.effectors}
    entity_names = set(region_map) | agent_names | set(decl.object_map)
    call_tokens = (
        entity_names | effector_names | set(EDITS) | _PERCEIVE_TOKENS | _WAIT_TOKENS
    )

    def check_call(call: TaskCall, params: set[str], tok: _Token) -> TaskCall:
        call = _flatten_args(call)
        for a in call.args:
            if isinstance(a, TargetRef):
                if a.region not in region_map:
                    raise err(f"undeclared region {a.region!r}", tok)
                if not region_map[a.region].contains(a.coords):
                    raise err(f"coords {a.coords} outside region {a.region!r}", tok)
            elif a not in params and a not in call_tokens:
                raise err(f"undeclared reference {a!r}", tok)
        if call.name not in PRIMITIVE_NAMES:
            candidates = method_map.get(call.name)
            if not candidates:
                raise err(f"no methods for compound task {call.name!r}", tok)
            if not any(len(m.params) == len(call.args) for m in candidates):
                raise err(
                    f"no method of {call.name!r} takes {len(call.args)} argument(s)", tok
                )
        return call

    checked: dict[str, list[Method]] = {}
    for m, tok in methods:
        params = set(m.params)
        for p in m.preconditions:
            for a in p.args:
                if a not in params and a not in entity_names and a not in effector_names:
                    raise err(f"undeclared reference {a!r} in precondition", tok)
        subtasks = tuple(check_call(sub, params, tok) for sub in m.subtasks)
        checked.setdefault(m.task, []).append(
            Method(m.task, m.params, m.preconditions, subtasks)
        )

    final_methods = {k: tuple(v) for k, v in checked.items()}
    probe = Domain(name, decl, final_methods, goal_call)
    check_call(goal_call, set(), goal_tok)
    return probe


def parse(source: str | DomainSource, origin: str = "<string>") -> Domain:
    """Parse a domain file; raises ParseError / SemanticError on bad input."""
    if isinstance(source, DomainSource):
        return _Parser(source.text, source.origin).parse_domain()
    return _Parser(source, origin).parse_domain()


def _num(v: float) -> str:
    return repr(float(v))


def _render_call(call: TaskCall) -> str:
    args = list(call.args)
    rendered: list[str] = []
    if call.name == "wait" and len(args) >= 2:
        last, prev = args[-1], args[-2]
        if isinstance(prev, str) and prev in _OBJECT_WAITS and isinstance(last, str):
            args = args[:-2] + [f"{prev}({last})"]
    for a in args:
        if isinstance(a, TargetRef):
            rendered.append(f"{a.region}({_num(a.coords[0])}, {_num(a.coords[1])})")
        else:
            rendered.append(a)
    return f"{call.name}({', '.join(rendered)})"


def serialize(domain: Domain) -> str:
    """Canonical text form; serialize(parse(serialize(d))) is byte-stable."""
    decl = domain.declarations
    lines = [f'domain "{domain.name}" {{']
    if decl.regions:
        lines.append("  regions {")
        for r in decl.regions:
            entry = (
                f"    {r.name} ({_num(r.bounds[0])}, {_num(r.bounds[1])}, "
                f"{_num(r.bounds[2])}, {_num(r.bounds[3])})"
            )
            if not r.visible:
                entry += " hidden"
            lines.append(entry)
        lines.append("  }")
    if decl.agents:
        lines.append("  agents {")
        for a in decl.agents:
            caps = ", ".join(c for c in _CAP_ORDER if c in a.capabilities)
            reach = ", ".join(sorted(a.reach))
            eff = ", ".join(a.effectors)
            lines.append(
                f"    {a.name} {a.kind.value} caps [{caps}] reach [{reach}] effectors [{eff}]"
            )
        lines.append("  }")
    if decl.objects:
        lines.append("  objects {")
        for o in decl.objects:
            entry = (
                f"    {o.name} at {o.location.region} "
                f"({_num(o.location.coords[0])}, {_num(o.location.coords[1])})"
            )
            if o.kind != "component":
                entry += f" kind {o.kind}"
            if o.content is not None:
                entry += f" content {o.content}"
            lines.append(entry)
        lines.append("  }")
    lines.append(f"  goal {_render_call(domain.goal)}")
    for task_name, methods in domain.methods.items():
        for m in methods:
            head = f"  method {task_name}({', '.join(m.params)})"
            if m.preconditions:
                head += " pre [" + ", ".join(p.format() for p in m.preconditions) + "]"
            lines.append(head + " {")
            for sub in m.subtasks:
                lines.append(f"    {_render_call(sub)};")
            lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_bundled(name: str) -> Domain:
    """Load one of the domains shipped with the package."""
    if name not in BUNDLED_DOMAINS:
        raise ValueError(
            f"unknown bundled domain {name!r}; available: {', '.join(BUNDLED_DOMAINS)}"
        )
    text = resources.files("coplan.domains").joinpath(f"{name}.htn").read_text("utf-8")
    return parse(text, origin=f"{name}.htn")


def bundled_source(name: str) -> str:
    """Raw text of a bundled domain file."""
    if name not in BUNDLED_DOMAINS:
        raise ValueError(
            f"unknown bundled domain {name!r}; available: {', '.join(BUNDLED_DOMAINS)}"
        )
    return resources.files("coplan.domains").joinpath(f"{name}.htn").read_text("utf-8")
