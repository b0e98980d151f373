"""Grounding programs: the two surface grammars and their shared step model.

Narrative programs are dash-prefixed call lines::

    - describe('00:03', modality='audio', instruction='...')
    - hits = find_events('high note', 'audio')
    - synthesize(instruction='Count occurrences')

Logic programs are a closed subset of Python-looking statements::

    def execute_command(video, options):
        ts = video.find("high note in trumpet melody")
        evidence = [video.query(t, "Distinct?") for t in ts]
        return answer_question(evidence)

Nothing is ever executed as Python; lines are tokenized and matched against
the few forms both grammars allow.
"""

import ast
import io
import logging
import re
import tokenize
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from ..core.Citations import Modality, TimeSpan, format_timestamp, parse_timestamp
from ..core.Errors import CitationParseError, ProgramParseError

LOGGER = logging.getLogger(__name__)

PARADIGMS = ("logic", "narrative")
GROUNDINGS = ("declarative", "imperative")
STEP_OPS = ("find_event", "describe", "synthesize")

NARRATIVE_CALLS = {"describe": "describe", "find_events": "find_event", "find_event": "find_event",
                   "synthesize": "synthesize"}
LOGIC_CALLS = {"video.query": "describe", "video.find": "find_event", "answer_question": "synthesize"}

_FENCE_LINE_RE = re.compile(r"^\s*```")
_LABEL_LINE_RE = re.compile(r"^[A-Za-z][\w ]*:\s*$")
_NAME_SUFFIX_RE = re.compile(r"^(.*?)(\d+)$")
_SKIPPED_TOKENS = {tokenize.NEWLINE, tokenize.NL, tokenize.ENDMARKER, tokenize.COMMENT,
                   tokenize.INDENT, tokenize.DEDENT}


@dataclass(frozen=True)
class Step:
    op: str
    line: int
    binding: Optional[str] = None
    query: Optional[str] = None
    modality: Optional[Modality] = None
    spans: Tuple[TimeSpan, ...] = ()
    source: Optional[str] = None
    per_item: bool = False
    instruction: str = ""
    evidence: Tuple[str, ...] = ()

    def references(self) -> Tuple[str, ...]:
        return ((self.source,) if self.source else ()) + self.evidence

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"op": self.op, "line": self.line}
        if self.binding:
            data["binding"] = self.binding
        if self.op == "find_event":
            data["query"] = self.query
        if self.modality is not None:
            data["modality"] = self.modality.value
        if self.spans:
            data["spans"] = [_span_text(span) for span in self.spans]
        if self.source:
            data["source"] = self.source
            data["per_item"] = self.per_item
        if self.op != "find_event":
            data["instruction"] = self.instruction
        if self.evidence:
            data["evidence"] = list(self.evidence)
        return data


def _span_text(span: TimeSpan) -> str:
    text = format_timestamp(span.start_s)
    return text if span.is_point else f"{text}-{format_timestamp(span.end_s)}"


@dataclass(frozen=True)
class GroundingProgram:
    """A validated plan; construction fails with ProgramParseError on any invariant."""

    paradigm: str
    grounding: str
    steps: Tuple[Step, ...]
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ProgramParseError(f"Unknown paradigm {self.paradigm!r}")
        if self.grounding not in GROUNDINGS:
            raise ProgramParseError(f"Unknown grounding {self.grounding!r}")
        object.__setattr__(self, "steps", tuple(self.steps))
        self._check_terminal()
        self._check_axis()
        self._check_references()

    def _check_terminal(self) -> None:
        terminals = [s for s in self.steps if s.op == "synthesize"]
        last_line = self.steps[-1].line if self.steps else 0
        if not terminals:
            raise ProgramParseError("Missing terminal synthesize step", last_line)
        if len(terminals) > 1:
            raise ProgramParseError("More than one terminal step", terminals[1].line)
        if self.steps[-1].op != "synthesize":
            raise ProgramParseError("The terminal step must come last", terminals[0].line)

    def _check_axis(self) -> None:
        finds = self.find_steps()
        if self.grounding == "declarative":
            if finds:
                raise ProgramParseError("Declarative program may not search for events", finds[0].line)
            for step in self.describe_steps():
                if not step.spans:
                    raise ProgramParseError("Declarative describe step needs explicit timestamps", step.line)
        elif not finds:
            raise ProgramParseError("Imperative program needs at least one find step",
                                    self.steps[0].line if self.steps else 0)

    def _check_references(self) -> None:
        bound_at = {}
        for position, step in enumerate(self.steps):
            if step.binding:
                if step.binding in bound_at:
                    raise ProgramParseError(f"Name '{step.binding}' is bound twice", step.line)
                bound_at[step.binding] = position
        defined: Dict[str, str] = {}
        for position, step in enumerate(self.steps):
            for ref in step.references():
                if ref not in defined:
                    if ref in bound_at:
                        raise ProgramParseError(f"Forward reference to '{ref}'", step.line)
                    raise ProgramParseError(f"Unknown reference '{ref}'", step.line)
            if step.source and defined[step.source] != "find_event":
                raise ProgramParseError(f"'{step.source}' is not a find result", step.line)
            for ref in step.evidence:
                if defined[ref] != "describe":
                    raise ProgramParseError(f"'{ref}' is not a description", step.line)
            if step.op == "describe" and not (step.spans or step.source):
                raise ProgramParseError("Describe step needs timestamps or a find result", step.line)
            if step.binding:
                defined[step.binding] = step.op

    def find_steps(self) -> List[Step]:
        return [s for s in self.steps if s.op == "find_event"]

    def describe_steps(self) -> List[Step]:
        return [s for s in self.steps if s.op == "describe"]

    def to_dict(self) -> Dict[str, Any]:
        return {"paradigm": self.paradigm, "grounding": self.grounding,
                "steps": [s.to_dict() for s in self.steps]}


# --- expressions -----------------------------------------------------------

@dataclass(frozen=True)
class _Str:
    value: str
    column: int


@dataclass(frozen=True)
class _Name:
    name: str
    column: int


@dataclass(frozen=True)
class _Ellipsis:
    column: int


@dataclass(frozen=True)
class _Range:
    first: _Name
    last: _Name
    column: int


@dataclass(frozen=True)
class _Call:
    name: str
    args: Tuple[Any, ...]
    kwargs: Dict[str, Any]
    column: int


@dataclass(frozen=True)
class _Seq:
    items: Tuple[Any, ...]
    column: int


@dataclass(frozen=True)
class _Comprehension:
    element: Any
    var: str
    iterable: str
    column: int


class _LineParser:
    """Recursive descent over the tokens of one source line."""

    def __init__(self, text: str, line: int, indent: int):
        self.line = line
        self.indent = indent
        self.tokens = _tokenize(text, line, indent)
        self.pos = 0

    def error(self, message: str, token: Optional[tokenize.TokenInfo] = None) -> ProgramParseError:
        token = token if token is not None else self.peek()
        column = token.start[1] + self.indent + 1 if token is not None else self.indent + 1
        return ProgramParseError(message, self.line, column)

    def column(self) -> int:
        token = self.peek()
        return token.start[1] + self.indent + 1 if token is not None else 0

    def peek(self, ahead: int = 0) -> Optional[tokenize.TokenInfo]:
        index = self.pos + ahead
        return self.tokens[index] if index < len(self.tokens) else None

    def at(self, text: str, ahead: int = 0) -> bool:
        token = self.peek(ahead)
        return token is not None and token.type in (tokenize.OP, tokenize.NAME) and token.string == text

    def at_name(self, ahead: int = 0) -> bool:
        token = self.peek(ahead)
        return token is not None and token.type == tokenize.NAME

    def take(self) -> tokenize.TokenInfo:
        token = self.peek()
        if token is None:
            raise self.error("Unexpected end of line")
        self.pos += 1
        return token

    def expect(self, text: str) -> tokenize.TokenInfo:
        if not self.at(text):
            found = self.peek()
            raise self.error(f"Expected '{text}'" + (f", found '{found.string}'" if found else ""))
        return self.take()

    def name(self) -> str:
        if not self.at_name():
            raise self.error("Expected a name")
        return self.take().string

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def finish(self) -> None:
        if not self.done():
            raise self.error(f"Unexpected '{self.peek().string}'")

    def expression(self) -> Any:
        token = self.peek()
        if token is None:
            raise self.error("Expected an expression")
        column = self.column()
        if token.type == tokenize.STRING:
            self.take()
            try:
                value = ast.literal_eval(token.string)
            except (ValueError, SyntaxError):
                raise self.error("Malformed string", token)
            if not isinstance(value, str):
                raise self.error("Expected a text string", token)
            return _Str(value, column)
        if self.at("..."):
            self.take()
            return _Ellipsis(column)
        if self.at("["):
            return self._sequence("[", "]", allow_comprehension=True)
        if self.at("{"):
            return self._sequence("{", "}", allow_comprehension=False)
        if token.type == tokenize.NAME:
            dotted = self.take().string
            while self.at(".") and self.at_name(1):
                self.take()
                dotted += "." + self.take().string
            if self.at("("):
                return self._call(dotted, column)
            return _Name(dotted, column)
        raise self.error(f"Unexpected '{token.string}'", token)

    def _item(self) -> Any:
        item = self.expression()
        if self.at("...") and isinstance(item, _Name):
            self.take()
            if self.at_name() and not self.at("=", 1):
                last = self.expression()
                if isinstance(last, _Name):
                    return _Range(item, last, item.column)
                raise self.error("A range must join two names")
        elif self.at("..."):
            self.take()
        return item

    def _call(self, name: str, column: int) -> _Call:
        self.expect("(")
        args: List[Any] = []
        kwargs: Dict[str, Any] = {}
        while not self.at(")"):
            if self.at_name() and self.at("=", 1):
                key = self.take().string
                self.take()
                if key in kwargs:
                    raise self.error(f"Repeated argument '{key}'")
                kwargs[key] = self._item()
            else:
                args.append(self._item())
            if not self.at(")"):
                self.expect(",")
        self.expect(")")
        return _Call(name, tuple(a for a in args if not isinstance(a, _Ellipsis)), kwargs, column)

    def _sequence(self, opener: str, closer: str, allow_comprehension: bool) -> Any:
        column = self.column()
        self.expect(opener)
        items: List[Any] = []
        while not self.at(closer):
            items.append(self._item())
            if allow_comprehension and len(items) == 1 and self.at("for"):
                self.take()
                var = self.name()
                self.expect("in")
                iterable = self.name()
                self.expect(closer)
                return _Comprehension(items[0], var, iterable, column)
            if not self.at(closer):
                self.expect(",")
        self.expect(closer)
        return _Seq(tuple(items), column)


def _tokenize(text: str, line: int, indent: int) -> List[tokenize.TokenInfo]:
    try:
        tokens = [t for t in tokenize.generate_tokens(io.StringIO(text).readline) if t.type not in _SKIPPED_TOKENS]
    except (tokenize.TokenError, SyntaxError) as e:
        raise ProgramParseError(f"Cannot tokenize: {e.args[0] if e.args else e}", line, indent + 1)
    for token in tokens:
        if token.type == tokenize.ERRORTOKEN and not token.string.isspace():
            raise ProgramParseError(f"Unexpected character {token.string!r}", line, indent + token.start[1] + 1)
    return tokens


# --- step building ---------------------------------------------------------

class _StepBuilder:
    """Collects steps; shared by both grammars."""

    def __init__(self):
        self.steps: List[Step] = []
        self._auto = 0

    def add(self, step: Step) -> Step:
        self.steps.append(step)
        return step

    def auto_binding(self) -> str:
        self._auto += 1
        return f"_found_{self._auto}"


def _text(node: Any, parser: _LineParser, what: str) -> str:
    if not isinstance(node, _Str):
        raise ProgramParseError(f"{what} must be a quoted string", parser.line, getattr(node, "column", 0))
    return node.value


def _modality(node: Any, parser: _LineParser) -> Modality:
    text = _text(node, parser, "Modality")
    try:
        return Modality.parse(text)
    except CitationParseError:
        raise ProgramParseError(f"Unknown modality {text!r}", parser.line, node.column)


def _spans(node: _Str, parser: _LineParser) -> Tuple[TimeSpan, ...]:
    spans = []
    for piece in re.split(r"[;,]", node.value):
        if not piece.strip():
            continue
        try:
            spans.append(parse_timestamp(piece.strip()))
        except CitationParseError as e:
            raise ProgramParseError(f"Bad timestamp {piece.strip()!r}: {e}", parser.line, node.column)
    if not spans:
        raise ProgramParseError("Empty timestamp", parser.line, node.column)
    return tuple(spans)


def _check_kwargs(call: _Call, allowed: Sequence[str], parser: _LineParser) -> None:
    for key in call.kwargs:
        if key not in allowed:
            raise ProgramParseError(f"Unexpected argument '{key}' to {call.name}", parser.line, call.column)


def _find_step(call: _Call, parser: _LineParser, binding: Optional[str]) -> Step:
    _check_kwargs(call, ("query", "modality"), parser)
    query = call.kwargs.get("query", call.args[0] if call.args else None)
    if query is None:
        raise ProgramParseError(f"{call.name} needs a query", parser.line, call.column)
    modality = call.kwargs.get("modality", call.args[1] if len(call.args) > 1 else None)
    if len(call.args) > 2:
        raise ProgramParseError(f"Too many arguments to {call.name}", parser.line, call.column)
    return Step("find_event", parser.line, binding=binding, query=_text(query, parser, "Query"),
                modality=_modality(modality, parser) if modality is not None else None)


def _describe_step(call: _Call, parser: _LineParser, builder: _StepBuilder, binding: Optional[str],
                   loop_var: Optional[str] = None, loop_source: Optional[str] = None) -> Step:
    _check_kwargs(call, ("modality", "instruction", "query", "segment"), parser)
    positional = list(call.args)
    target = call.kwargs.get("segment", positional.pop(0) if positional else None)
    if target is None:
        raise ProgramParseError(f"{call.name} needs a segment", parser.line, call.column)
    instruction = call.kwargs.get("instruction", call.kwargs.get("query", positional.pop(0) if positional else None))
    modality = call.kwargs.get("modality", positional.pop(0) if positional else None)
    if positional:
        raise ProgramParseError(f"Too many arguments to {call.name}", parser.line, call.column)

    fields: Dict[str, Any] = {
        "binding": binding,
        "instruction": _text(instruction, parser, "Instruction") if instruction is not None else "",
        "modality": _modality(modality, parser) if modality is not None else None,
    }
    if isinstance(target, _Str):
        fields["spans"] = _spans(target, parser)
    elif isinstance(target, _Name) and loop_var is not None and target.name == loop_var:
        fields.update(source=loop_source, per_item=True)
    elif isinstance(target, _Name) and "." not in target.name:
        fields["source"] = target.name
    elif isinstance(target, _Call) and NARRATIVE_CALLS.get(target.name) == "find_event":
        found = builder.add(_find_step(target, parser, builder.auto_binding()))
        fields["source"] = found.binding
    else:
        raise ProgramParseError("Segment must be a timestamp string or a find result", parser.line,
                                getattr(target, "column", call.column))
    return Step("describe", parser.line, **fields)


def _evidence(nodes: Sequence[Any], parser: _LineParser) -> Tuple[str, ...]:
    names: List[str] = []
    flat: List[Any] = []
    for node in nodes:
        flat.extend(node.items if isinstance(node, _Seq) else [node])
    for i, node in enumerate(flat):
        if isinstance(node, _Name):
            names.append(node.name)
        elif isinstance(node, _Range):
            names.extend(_expand_range(node.first.name, node.last.name, parser, node.column))
        elif isinstance(node, _Ellipsis):
            before, after = (flat[i - 1] if i else None), (flat[i + 1] if i + 1 < len(flat) else None)
            if isinstance(before, _Name) and isinstance(after, _Name):
                names.extend(_expand_range(before.name, after.name, parser, node.column)[1:-1])
        else:
            raise ProgramParseError("Evidence must name earlier results", parser.line, getattr(node, "column", 0))
    return tuple(dict.fromkeys(names))


def _expand_range(first: str, last: str, parser: _LineParser, column: int) -> List[str]:
    """``obs_1...obs_4`` -> obs_1, obs_2, obs_3, obs_4."""
    a, b = _NAME_SUFFIX_RE.match(first), _NAME_SUFFIX_RE.match(last)
    if not a or not b or a.group(1) != b.group(1) or int(a.group(2)) > int(b.group(2)):
        raise ProgramParseError(f"Cannot expand range {first}...{last}", parser.line, column)
    return [f"{a.group(1)}{n}" for n in range(int(a.group(2)), int(b.group(2)) + 1)]


def _synthesize_step(call: _Call, parser: _LineParser) -> Step:
    _check_kwargs(call, ("instruction", "evidence"), parser)
    args = list(call.args)
    instruction = call.kwargs.get("instruction")
    if instruction is None and args and isinstance(args[-1], _Str):
        instruction = args.pop()
    if "evidence" in call.kwargs:
        args.append(call.kwargs["evidence"])
    return Step("synthesize", parser.line,
                instruction=_text(instruction, parser, "Instruction") if instruction is not None else "",
                evidence=_evidence(args, parser))


# --- grammars --------------------------------------------------------------

def _source_lines(text: str) -> List[Tuple[int, str]]:
    """(line number, raw line) pairs with fences, blanks and comments removed."""
    text = text.replace("…", "...").replace("‘", "'").replace("’", "'")
    text = text.replace("“", '"').replace("”", '"').expandtabs(4)
    kept = []
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#") or _FENCE_LINE_RE.match(raw):
            continue
        kept.append((number, raw.rstrip()))
    return kept


def _parse_narrative(text: str) -> List[Step]:
    builder = _StepBuilder()
    for number, raw in _source_lines(text):
        stripped = raw.strip()
        if not stripped.startswith("-"):
            if _LABEL_LINE_RE.match(stripped):
                continue
            raise ProgramParseError("Narrative lines must start with '- '", number, len(raw) - len(raw.lstrip()) + 1)
        body = stripped[1:].strip()
        indent = raw.index(body) if body else len(raw)
        parser = _LineParser(body, number, indent)
        binding = None
        if parser.at_name() and parser.at("=", 1):
            binding = parser.take().string
            parser.take()
        call = parser.expression()
        parser.finish()
        if not isinstance(call, _Call):
            raise ProgramParseError("Expected an operation call", number, indent)
        op = NARRATIVE_CALLS.get(call.name)
        if op is None:
            raise ProgramParseError(f"Unknown operation '{call.name}'", number, call.column)
        if op == "find_event":
            builder.add(_find_step(call, parser, binding))
        elif op == "describe":
            builder.add(_describe_step(call, parser, builder, binding))
        else:
            if binding:
                raise ProgramParseError("synthesize cannot be bound to a name", number, call.column)
            builder.add(_synthesize_step(call, parser))
    return builder.steps


def _parse_logic(text: str) -> List[Step]:
    builder = _StepBuilder()
    lines = _source_lines(text)
    header_indent: Optional[int] = None
    loop: Optional[Tuple[int, str, str]] = None  # (indent, variable, iterable)
    loops_seen = 0
    terminated_at = 0
    for number, raw in lines:
        indent = len(raw) - len(raw.lstrip())
        parser = _LineParser(raw.strip(), number, indent)
        if terminated_at:
            raise ProgramParseError("Statement after the terminal answer_question call", number, indent + 1)

        if parser.at("def"):
            if header_indent is not None or builder.steps:
                raise ProgramParseError("Only one function header is allowed, and it must come first",
                                        number, indent + 1)
            parser.take()
            parser.name()
            parser.expect("(")
            while not parser.at(")"):
                parser.name()
                if not parser.at(")"):
                    parser.expect(",")
            parser.expect(")")
            parser.expect(":")
            parser.finish()
            header_indent = indent
            continue
        if header_indent is not None and indent <= header_indent:
            raise ProgramParseError("Statement outside the function body", number, indent + 1)

        if loop is not None and indent <= loop[0]:
            loop = None
        if parser.at("for"):
            if loop is not None:
                raise ProgramParseError("Loops cannot be nested", number, indent + 1)
            if loops_seen:
                raise ProgramParseError("Only one loop is allowed", number, indent + 1)
            parser.take()
            var = parser.name()
            parser.expect("in")
            iterable = parser.name()
            parser.expect(":")
            parser.finish()
            loop = (indent, var, iterable)
            loops_seen += 1
            continue

        if parser.at("return"):
            if loop is not None:
                raise ProgramParseError("answer_question must be outside the loop", number, indent + 1)
            parser.take()
            call = parser.expression()
            parser.finish()
            if not isinstance(call, _Call) or LOGIC_CALLS.get(call.name) != "synthesize":
                raise ProgramParseError("The program must return answer_question(...)", number, indent + 8)
            builder.add(_synthesize_step(call, parser))
            terminated_at = number
            continue

        if not (parser.at_name() and parser.at("=", 1)):
            raise ProgramParseError("Expected an assignment, a for loop or a return", number, indent + 1)
        binding = parser.take().string
        parser.take()
        value = parser.expression()
        parser.finish()
        builder.add(_logic_assignment(value, binding, parser, builder, loop))
    return builder.steps


def _logic_assignment(value: Any, binding: str, parser: _LineParser, builder: _StepBuilder,
                      loop: Optional[Tuple[int, str, str]]) -> Step:
    loop_var, loop_source = (loop[1], loop[2]) if loop else (None, None)
    if isinstance(value, _Comprehension):
        if loop is not None:
            raise ProgramParseError("Loops cannot be nested", parser.line, value.column)
        element = value.element
        if not isinstance(element, _Call) or LOGIC_CALLS.get(element.name) != "describe":
            raise ProgramParseError("Only video.query may be mapped over find results", parser.line, value.column)
        return _describe_step(element, parser, builder, binding, value.var, value.iterable)
    if not isinstance(value, _Call):
        raise ProgramParseError("Only tool-call results may be assigned", parser.line, getattr(value, "column", 0))
    op = LOGIC_CALLS.get(value.name)
    if op is None:
        raise ProgramParseError(f"Unknown operation '{value.name}'", parser.line, value.column)
    if op == "find_event":
        if loop is not None:
            raise ProgramParseError("video.find cannot run inside the loop", parser.line, value.column)
        return _find_step(value, parser, binding)
    if op == "synthesize":
        raise ProgramParseError("answer_question must be returned", parser.line, value.column)
    return _describe_step(value, parser, builder, binding, loop_var, loop_source)


def parse_program(text: str, paradigm: str, grounding: Optional[str] = None) -> GroundingProgram:
    """Parse and validate a program; ``grounding`` is inferred when omitted."""
    if paradigm not in PARADIGMS:
        raise ProgramParseError(f"Unknown paradigm {paradigm!r}")
    steps = _parse_logic(text) if paradigm == "logic" else _parse_narrative(text)
    if grounding is None:
        grounding = "imperative" if any(s.op == "find_event" for s in steps) else "declarative"
    program = GroundingProgram(paradigm, grounding, tuple(steps), source=text)
    LOGGER.debug("Parsed %s/%s program with %d steps", paradigm, grounding, len(program.steps))
    return program


def program_outline(program: Union[GroundingProgram, Sequence[Step]]) -> List[str]:
    """Op names in order, with per-item describes marked (for logging and tests)."""
    steps = program.steps if isinstance(program, GroundingProgram) else program
    return [f"{s.op}[each]" if s.per_item else s.op for s in steps]
