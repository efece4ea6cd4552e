"""Depth-first UI stimulation over an abstract app UI graph.

The explorer stimulates unvisited elements of the current state in declared
order, descends into states that still have work, and restores the previous
state from its stack once the current one is exhausted. Every interaction
is recorded so a run can be replayed against the same graph.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

CRASH = "CRASH"


class ElementKind(str, Enum):
    CLICKABLE = "CLICKABLE"
    SCROLLABLE = "SCROLLABLE"
    TYPABLE = "TYPABLE"


class Outcome(str, Enum):
    TRANSITION = "TRANSITION"
    SELF_LOOP = "SELF_LOOP"
    BACKTRACK = "BACKTRACK"
    CRASH = "CRASH"


class GraphError(ValueError):
    """Malformed UI graph fixture."""


class ContractViolation(Exception):
    """An interaction named an element that is not in the given state."""


class ReplayMismatch(Exception):
    def __init__(self, step_index: int, message: str) -> None:
        super().__init__(f"replay diverged at step {step_index}: {message}")
        self.step_index = step_index


@dataclass(frozen=True)
class UiElement:
    element_id: str
    kind: ElementKind = ElementKind.CLICKABLE


@dataclass(frozen=True)
class UiState:
    state_id: str
    elements: tuple[UiElement, ...] = ()

    def element(self, element_id: str) -> UiElement | None:
        for el in self.elements:
            if el.element_id == element_id:
                return el
        return None


@dataclass
class UiGraph:
    states: dict[str, UiState]
    root: str
    # (state_id, element_id, input_class) -> next state_id or CRASH
    transitions: dict[tuple[str, str, int], str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.root not in self.states:
            raise GraphError(f"root state {self.root!r} is not declared")
        for st in self.states.values():
            ids = [e.element_id for e in st.elements]
            if len(ids) != len(set(ids)):
                raise GraphError(f"duplicate element ids in state {st.state_id!r}")
        for (src, el, cls), dst in self.transitions.items():
            if src not in self.states:
                raise GraphError(f"transition from undeclared state {src!r}")
            if self.states[src].element(el) is None:
                raise GraphError(f"transition on undeclared element {src}/{el}")
            if cls < 0:
                raise GraphError(f"negative input_class on {src}/{el}")
            if dst != CRASH and dst not in self.states:
                raise GraphError(f"transition to undeclared state {dst!r}")

    def target(self, state_id: str, element_id: str, input_class: int = 0) -> str:
        return self.transitions.get((state_id, element_id, input_class), state_id)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "UiGraph":
        try:
            states = {}
            for s in doc["states"]:
                elements = tuple(
                    UiElement(e["element_id"], ElementKind(e.get("kind", "CLICKABLE").upper()))
                    for e in s.get("elements", [])
                )
                states[s["state_id"]] = UiState(s["state_id"], elements)
            transitions = {}
            for t in doc.get("transitions", []):
                key = (t["from"], t["element"], int(t.get("input_class", 0)))
                transitions[key] = CRASH if t.get("crash") else t["to"]
            return cls(states, doc["root"], transitions)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(f"malformed UI graph: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "UiGraph":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json(doc)

    def to_json(self) -> dict[str, Any]:
        trans = []
        for (src, el, cls_), dst in sorted(self.transitions.items()):
            t: dict[str, Any] = {"from": src, "element": el, "input_class": cls_}
            if dst == CRASH:
                t["crash"] = True
            else:
                t["to"] = dst
            trans.append(t)
        return {
            "root": self.root,
            "states": [
                {"state_id": s.state_id,
                 "elements": [{"element_id": e.element_id, "kind": e.kind.value} for e in s.elements]}
                for s in self.states.values()
            ],
            "transitions": trans,
        }


@dataclass(frozen=True)
class ExploreConfig:
    """Typed-input strings and how typable elements pick one.

    ``policy="first"`` always types the first string; ``"cycle"`` walks the
    list across successive typable interactions.
    """

    inputs: tuple[str, ...] = ("hello world", "5551234")
    policy: str = "first"

    def __post_init__(self) -> None:
        if not self.inputs:
            raise ValueError("at least one input string is required")
        if self.policy not in ("first", "cycle"):
            raise ValueError(f"unknown input policy {self.policy!r}")

    def input_classes(self) -> tuple[int, ...]:
        return (0,) if self.policy == "first" else tuple(range(len(self.inputs)))


@dataclass(frozen=True)
class Step:
    state_id: str
    element_id: str | None
    input: str | None
    input_class: int
    outcome: Outcome
    next_state: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "state_id": self.state_id,
            "element_id": self.element_id,
            "input": self.input,
            "input_class": self.input_class,
            "outcome": self.outcome.value,
            "next_state": self.next_state,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Step":
        return cls(doc["state_id"], doc["element_id"], doc["input"], int(doc["input_class"]),
                   Outcome(doc["outcome"]), doc["next_state"])


@dataclass
class InteractionRecord:
    steps: list[Step] = field(default_factory=list)
    input_classes: tuple[int, ...] = (0,)

    def interaction_count(self) -> int:
        return sum(1 for s in self.steps if s.outcome is not Outcome.BACKTRACK)

    def crashed(self) -> bool:
        return bool(self.steps) and self.steps[-1].outcome is Outcome.CRASH

    def visited_states(self, root: str | None = None) -> set[str]:
        seen = set() if root is None else {root}
        for s in self.steps:
            seen.add(s.state_id)
            if s.outcome is Outcome.TRANSITION and s.next_state is not None:
                seen.add(s.next_state)
        return seen

    def stimulated(self) -> set[tuple[str, str]]:
        return {(s.state_id, s.element_id) for s in self.steps
                if s.outcome is not Outcome.BACKTRACK and s.element_id is not None}

    def to_json(self) -> dict[str, Any]:
        return {"input_classes": list(self.input_classes), "steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "InteractionRecord":
        return cls([Step.from_json(s) for s in doc["steps"]], tuple(doc.get("input_classes", (0,))))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


UiHook = Callable[[str, str], None]


def interact(graph: UiGraph, state_id: str, element_id: str, input_class: int = 0,
             hook: UiHook | None = None) -> tuple[Outcome, str | None]:
    """Apply one input; return the outcome and the state the app lands in.

    Undeclared transitions leave the app where it is. `hook` receives
    ``(state_id, element_id)`` before the outcome is known, mirroring a
    running app whose handler fires on the event.
    """
    state = graph.states.get(state_id)
    if state is None or state.element(element_id) is None:
        raise ContractViolation(f"element {element_id!r} is not part of state {state_id!r}")
    if hook is not None:
        hook(state_id, element_id)
    dst = graph.target(state_id, element_id, input_class)
    if dst == CRASH:
        return Outcome.CRASH, None
    if dst == state_id:
        return Outcome.SELF_LOOP, state_id
    return Outcome.TRANSITION, dst


def explore(graph: UiGraph, budget: int, cfg: ExploreConfig | None = None,
            hook: UiHook | None = None) -> InteractionRecord:
    if budget < 0:
        raise ValueError("budget must be non-negative")
    cfg = cfg or ExploreConfig()
    record = InteractionRecord([], cfg.input_classes())
    if budget == 0:
        return record
    done: set[tuple[str, str]] = set()
    cursor: dict[str, int] = {}
    typed = 0

    def next_element(state_id: str) -> UiElement | None:
        elements = graph.states[state_id].elements
        i = cursor.get(state_id, 0)
        while i < len(elements) and (state_id, elements[i].element_id) in done:
            i += 1
        cursor[state_id] = i
        return elements[i] if i < len(elements) else None

    stack = [graph.root]
    used = 0
    while used < budget:
        current = stack[-1]
        el = next_element(current)
        if el is None:
            exhausted = stack.pop()
            while stack and next_element(stack[-1]) is None:
                stack.pop()
            if not stack:
                # everything reachable is done; unwind to the root and stop
                if exhausted != graph.root:
                    record.steps.append(Step(exhausted, None, None, 0, Outcome.BACKTRACK, graph.root))
                break
            record.steps.append(Step(exhausted, None, None, 0, Outcome.BACKTRACK, stack[-1]))
            continue
        if el.kind is ElementKind.TYPABLE:
            cls_ = 0 if cfg.policy == "first" else typed % len(cfg.inputs)
            typed += 1
            text = cfg.inputs[cls_]
        else:
            cls_, text = 0, None
        done.add((current, el.element_id))
        used += 1
        outcome, landed = interact(graph, current, el.element_id, cls_, hook)
        record.steps.append(Step(current, el.element_id, text, cls_, outcome,
                                 landed if outcome is Outcome.TRANSITION else None))
        if outcome is Outcome.CRASH:
            break
        if outcome is Outcome.TRANSITION and next_element(landed) is not None:
            stack.append(landed)
    return record


def replay(graph: UiGraph, record: InteractionRecord, hook: UiHook | None = None) -> InteractionRecord:
    """Re-drive every recorded input and check the app reacts the same way."""
    out = InteractionRecord([], record.input_classes)
    for i, step in enumerate(record.steps):
        if step.outcome is Outcome.BACKTRACK:
            if step.next_state not in graph.states:
                raise ReplayMismatch(i, f"backtrack target {step.next_state!r} no longer exists")
            out.steps.append(step)
            continue
        try:
            outcome, landed = interact(graph, step.state_id, step.element_id, step.input_class, hook)
        except ContractViolation as exc:
            raise ReplayMismatch(i, str(exc)) from exc
        got = Step(step.state_id, step.element_id, step.input, step.input_class, outcome,
                   landed if outcome is Outcome.TRANSITION else None)
        if got != step:
            raise ReplayMismatch(
                i, f"expected {step.outcome.value}->{step.next_state}, got {outcome.value}->{got.next_state}"
            )
        out.steps.append(got)
    return out


def reachable(graph: UiGraph, input_classes: Iterable[int] | None = None) -> set[str]:
    """States reachable from the root using the given input classes (all if None)."""
    allowed = None if input_classes is None else set(input_classes)
    seen = {graph.root}
    queue = deque([graph.root])
    edges: dict[str, list[str]] = {}
    for (src, _el, cls_), dst in graph.transitions.items():
        if dst != CRASH and (allowed is None or cls_ in allowed):
            edges.setdefault(src, []).append(dst)
    while queue:
        s = queue.popleft()
        for nxt in edges.get(s, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def coverage(record: InteractionRecord, graph: UiGraph) -> tuple[float, float]:
    """(visited / reachable states, stimulated / reachable elements).

    Reachability only follows input classes the recording explorer could
    produce, so a state gated behind a specific phone number does not count
    against a generic-text explorer.
    """
    states = reachable(graph, record.input_classes)
    elements = {(s, e.element_id) for s in states for e in graph.states[s].elements}
    visited = record.visited_states(graph.root) & states
    hit = record.stimulated() & elements
    sf = len(visited) / len(states)
    ef = len(hit) / len(elements) if elements else 1.0
    return sf, ef
