"""Attack-tree risk engine and on-chain privacy observer.

Trees are written in a small indented DSL (see ``parse_trees``) with OR, AND
and SAND gates, shared sub-trees by reference and ``times:X`` multiplicity.
Evaluation is bottom-up; ``enumerate_cutsets`` is an independent oracle.
The observer looks only at public chain data: revealed tapscripts, control
blocks and the spend graph.
"""

from __future__ import annotations

import itertools
import math
import random
import re
import shlex
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from . import crypto, script, taproot, txmodel
from .chainsim import Chain, Outpoint


class AnalysisError(Exception):
    pass


class BadReference(AnalysisError):
    pass


class BadParameters(AnalysisError):
    pass


class TreeSyntaxError(AnalysisError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class TooManyCutsets(AnalysisError):
    pass


GATES = ("OR", "AND", "SAND")
Times = Union[int, str]


@dataclass(frozen=True)
class Attributes:
    cost: float
    time: float
    prob: float

    def __post_init__(self):
        if self.cost < 0 or self.time < 0 or not 0.0 <= self.prob <= 1.0:
            raise AnalysisError(f"bad attributes {self}")


@dataclass(frozen=True)
class Leaf:
    label: str
    attrs: Optional[Attributes] = None
    tags: Tuple[str, ...] = ()
    times: Times = 1
    times_kind: str = "AND"
    id: str = ""


@dataclass(frozen=True)
class Gate:
    kind: str
    children: Tuple["Node", ...]
    label: str = ""
    times: Times = 1
    times_kind: str = "AND"


@dataclass(frozen=True)
class Ref:
    target: str
    label: str = ""
    times: Times = 1
    times_kind: str = "AND"


Node = Union[Leaf, Gate, Ref]


@dataclass(frozen=True)
class TreeDef:
    id: str
    title: str
    root: Node
    params: Tuple[str, ...] = ()
    constraints: Tuple[str, ...] = ()


# DSL

_TIMES = re.compile(r"^times:([A-Za-z0-9_]+)(?::(AND|SAND))?$")


def _parse_times(tok: str) -> Tuple[Times, str]:
    m = _TIMES.match(tok)
    x = m.group(1)
    return (int(x) if x.isdigit() else x), (m.group(2) or "AND")


def _parse_node_line(text: str, lineno: int) -> Tuple[str, dict]:
    try:
        toks = shlex.split(text)
    except ValueError as exc:
        raise TreeSyntaxError(lineno, str(exc))
    if not toks:
        raise TreeSyntaxError(lineno, "empty node")
    head, rest = toks[0], toks[1:]
    info: dict = {"times": 1, "times_kind": "AND", "label": ""}
    if head == "ref":
        if not rest:
            raise TreeSyntaxError(lineno, "ref needs a target")
        info["target"] = rest.pop(0)
    elif head not in GATES and head != "leaf":
        raise TreeSyntaxError(lineno, f"unknown node kind {head!r}")
    attrs: Dict[str, float] = {}
    for tok in rest:
        if _TIMES.match(tok):
            info["times"], info["times_kind"] = _parse_times(tok)
        elif tok.startswith("tags="):
            info["tags"] = tuple(t for t in tok[5:].split(",") if t)
        elif "=" in tok:
            k, v = tok.split("=", 1)
            if k not in ("cost", "time", "prob"):
                raise TreeSyntaxError(lineno, f"unknown attribute {k!r}")
            try:
                attrs[k] = float(v)
            except ValueError:
                raise TreeSyntaxError(lineno, f"bad number {v!r}")
        elif not info["label"]:
            info["label"] = tok
        else:
            raise TreeSyntaxError(lineno, f"unexpected token {tok!r}")
    if attrs:
        if set(attrs) != {"cost", "time", "prob"}:
            raise TreeSyntaxError(lineno, "leaf attributes need cost, time and prob")
        info["attrs"] = Attributes(attrs["cost"], attrs["time"], attrs["prob"])
    return head, info


def parse_trees(text: str) -> Dict[str, TreeDef]:
    """Parse one or more trees.

    Header lines ``tree <id>``, ``title "<text>"``, ``params A B``,
    ``constraint <expr> = <expr>`` (or ``<=``) precede one root node. Each
    node line is ``OR|AND|SAND ["label"]``, ``ref <id> ["label"]`` or
    ``leaf "label" [cost=.. time=.. prob=..] [tags=a,b]``, optionally with
    ``times:<X>`` or ``times:<X>:SAND``. Children are indented by two spaces.
    """
    trees: Dict[str, TreeDef] = {}
    cur: Optional[dict] = None
    stack: List[Tuple[int, dict]] = []

    def finish():
        if cur is None:
            return
        if cur["root"] is None:
            raise TreeSyntaxError(cur["line"], f"tree {cur['id']} has no root")
        trees[cur["id"]] = TreeDef(cur["id"], cur["title"], _build(cur["root"]), tuple(cur["params"]),
                                   tuple(cur["constraints"]))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip()
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        indent = len(line) - len(line.lstrip(" "))
        body = line.strip()
        word = body.split(None, 1)[0]
        if indent == 0 and word == "tree":
            finish()
            parts = body.split()
            if len(parts) != 2:
                raise TreeSyntaxError(lineno, "expected 'tree <id>'")
            if parts[1] in trees:
                raise TreeSyntaxError(lineno, f"duplicate tree {parts[1]}")
            cur = {"id": parts[1], "title": "", "params": [], "constraints": [], "root": None, "line": lineno}
            stack = []
            continue
        if cur is None:
            raise TreeSyntaxError(lineno, "content before 'tree'")
        if indent == 0 and word == "title":
            try:
                cur["title"] = " ".join(shlex.split(body)[1:])
            except ValueError as exc:
                raise TreeSyntaxError(lineno, str(exc))
            continue
        if indent == 0 and word == "params":
            cur["params"] = body.split()[1:]
            continue
        if indent == 0 and word == "constraint":
            expr = body.split(None, 1)[1] if len(body.split(None, 1)) > 1 else ""
            _check_constraint_syntax(expr, lineno)
            cur["constraints"].append(expr)
            continue
        if indent % 2:
            raise TreeSyntaxError(lineno, "indentation must be a multiple of two spaces")
        depth = indent // 2
        kind, info = _parse_node_line(body, lineno)
        node = {"kind": kind, "info": info, "children": [], "line": lineno}
        if depth == 0:
            if cur["root"] is not None:
                raise TreeSyntaxError(lineno, "a tree has exactly one root")
            cur["root"] = node
            stack = [(0, node)]
            continue
        while stack and stack[-1][0] >= depth:
            stack.pop()
        if not stack or stack[-1][0] != depth - 1:
            raise TreeSyntaxError(lineno, "bad indentation")
        parent = stack[-1][1]
        if parent["kind"] not in GATES:
            raise TreeSyntaxError(lineno, "only gates have children")
        parent["children"].append(node)
        stack.append((depth, node))
    finish()
    return trees


def _build(n: dict) -> Node:
    info = n["info"]
    if n["kind"] == "leaf":
        return Leaf(info["label"], info.get("attrs"), info.get("tags", ()), info["times"], info["times_kind"])
    if n["kind"] == "ref":
        return Ref(info["target"], info["label"], info["times"], info["times_kind"])
    if not n["children"]:
        raise TreeSyntaxError(n["line"], "gate without children")
    return Gate(n["kind"], tuple(_build(c) for c in n["children"]), info["label"], info["times"], info["times_kind"])


def _fmt_num(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def _node_line(n: Node) -> str:
    if isinstance(n, Leaf):
        parts = ["leaf", shlex.quote(n.label)]
        if n.attrs is not None:
            parts += [f"cost={_fmt_num(n.attrs.cost)}", f"time={_fmt_num(n.attrs.time)}",
                      f"prob={_fmt_num(n.attrs.prob)}"]
        if n.tags:
            parts.append("tags=" + ",".join(n.tags))
    elif isinstance(n, Ref):
        parts = ["ref", n.target] + ([shlex.quote(n.label)] if n.label else [])
    else:
        parts = [n.kind] + ([shlex.quote(n.label)] if n.label else [])
    if n.times != 1 or n.times_kind != "AND":
        parts.append(f"times:{n.times}" + (":SAND" if n.times_kind == "SAND" else ""))
    return " ".join(parts)


def serialize_tree(t: TreeDef) -> str:
    lines = [f"tree {t.id}"]
    if t.title:
        lines.append(f"title {shlex.quote(t.title)}")
    if t.params:
        lines.append("params " + " ".join(t.params))
    lines += [f"constraint {c}" for c in t.constraints]

    def walk(n: Node, depth: int):
        lines.append("  " * depth + _node_line(n))
        if isinstance(n, Gate):
            for c in n.children:
                walk(c, depth + 1)

    walk(t.root, 0)
    return "\n".join(lines) + "\n"


def serialize_trees(trees: Mapping[str, TreeDef]) -> str:
    return "\n".join(serialize_tree(trees[k]) for k in trees)


# parameters

_EXPR_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_]*)|([+-]))")


def _check_constraint_syntax(expr: str, lineno: int):
    if expr.count("<=") + expr.count("=") - expr.count("<=") != 1:
        raise TreeSyntaxError(lineno, f"constraint needs one '=' or '<=': {expr!r}")


def _eval_expr(expr: str, params: Mapping[str, int]) -> int:
    total, sign, pos, expect_term = 0, 1, 0, True
    expr = expr.strip()
    while pos < len(expr):
        m = _EXPR_TOKEN.match(expr, pos)
        if not m:
            raise BadParameters(f"cannot parse {expr!r}")
        num, name, op = m.groups()
        pos = m.end()
        if expect_term:
            if op:
                sign = -sign if op == "-" else sign
                continue
            if num is not None:
                total += sign * int(num)
            else:
                if name not in params:
                    raise BadParameters(f"missing parameter {name}")
                total += sign * int(params[name])
            sign, expect_term = 1, False
        else:
            if not op:
                raise BadParameters(f"cannot parse {expr!r}")
            sign, expect_term = (-1 if op == "-" else 1), True
    if expect_term:
        raise BadParameters(f"cannot parse {expr!r}")
    return total


def check_constraint(expr: str, params: Mapping[str, int]) -> bool:
    if "<=" in expr:
        lhs, rhs = expr.split("<=")
        return _eval_expr(lhs, params) <= _eval_expr(rhs, params)
    lhs, rhs = expr.split("=")
    return _eval_expr(lhs, params) == _eval_expr(rhs, params)


def _resolve_times(t: Times, params: Mapping[str, int]) -> int:
    if isinstance(t, int):
        x = t
    elif t in params:
        x = int(params[t])
    else:
        raise BadParameters(f"missing parameter {t}")
    if x < 0:
        raise BadParameters(f"multiplicity {t} = {x} is negative")
    return x


def reachable(library: Mapping[str, TreeDef], tree_id: str) -> List[str]:
    """Tree ids reachable from ``tree_id`` through references, in DFS order."""
    seen: List[str] = []

    def visit(tid: str, path: Tuple[str, ...]):
        if tid in path:
            raise BadReference(f"cyclic reference {' -> '.join(path + (tid,))}")
        if tid not in library:
            raise BadReference(f"unknown tree {tid}")
        if tid not in seen:
            seen.append(tid)
        for r in _refs(library[tid].root):
            visit(r, path + (tid,))

    visit(tree_id, ())
    return seen


def _refs(n: Node) -> List[str]:
    if isinstance(n, Ref):
        return [n.target]
    if isinstance(n, Gate):
        return [r for c in n.children for r in _refs(c)]
    return []


def required_params(library: Mapping[str, TreeDef], tree_id: str) -> Tuple[str, ...]:
    out: List[str] = []
    for tid in reachable(library, tree_id):
        for p in library[tid].params:
            if p not in out:
                out.append(p)
    return tuple(out)


def check_parameters(library: Mapping[str, TreeDef], tree_id: str, params: Mapping[str, int]):
    for tid in reachable(library, tree_id):
        t = library[tid]
        for p in t.params:
            if p not in params:
                raise BadParameters(f"tree {tid} needs parameter {p}")
            if int(params[p]) < 0:
                raise BadParameters(f"parameter {p} must be non-negative")
        for c in t.constraints:
            if not check_constraint(c, params):
                raise BadParameters(f"tree {tid}: constraint {c} fails for "
                                    + ", ".join(f"{k}={params[k]}" for k in sorted(params)))


def resolve(library: Mapping[str, TreeDef], tree_id: str, params: Optional[Mapping[str, int]] = None) -> Node:
    """Inline references and substitute parameter multiplicities (kept on
    nodes; see ``expand_multiplicity``). Validates constraints first."""
    params = dict(params or {})
    check_parameters(library, tree_id, params)

    def sub(n: Node, path: Tuple[str, ...]) -> Node:
        if isinstance(n, Ref):
            if n.target in path:
                raise BadReference(f"cyclic reference to {n.target}")
            if n.target not in library:
                raise BadReference(f"unknown tree {n.target}")
            inner = sub(library[n.target].root, path + (n.target,))
            times = _resolve_times(n.times, params)
            if times == 1:
                return inner
            return _with_times(inner, times, n.times_kind)
        times = _resolve_times(n.times, params)
        if isinstance(n, Leaf):
            return replace(n, times=times)
        return replace(n, children=tuple(sub(c, path) for c in n.children), times=times)

    return sub(library[tree_id].root, (tree_id,))


def _with_times(n: Node, times: int, kind: str) -> Node:
    if n.times != 1:
        # nest so that both multiplicities apply
        n = Gate(n.times_kind, (replace(n, times=1),) * int(n.times), n.label)
    return replace(n, times=times, times_kind=kind)


def expand_multiplicity(node: Node, prefix: str = "r") -> Node:
    """Replace every ``times:X`` node by an AND (or SAND) over X copies with
    distinct instance tags, and give each leaf a unique path id. A node with
    X = 0 is dropped from its parent; a gate left without children is an
    empty AND, which is satisfied at zero cost."""
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    if not isinstance(node.times, int):
        raise BadParameters(f"unresolved multiplicity {node.times}")

    def one(n: Node, pid: str) -> Node:
        if isinstance(n, Leaf):
            return replace(n, times=1, times_kind="AND", id=pid)
        kids = []
        for idx, c in enumerate(n.children):
            e = expand_multiplicity(c, f"{pid}.{idx}")
            if e is not None:
                kids.append(e)
        if not kids and n.kind == "OR":
            raise BadParameters("OR gate lost all children")
        return replace(n, children=tuple(kids), times=1, times_kind="AND")

    if node.times == 0:
        return None
    if node.times == 1:
        return one(node, prefix)
    copies = tuple(one(node, f"{prefix}#{k}") for k in range(1, node.times + 1))
    return Gate(node.times_kind, copies, f"{node.label} x{node.times}".strip())


def instantiate(library: Mapping[str, TreeDef], tree_id: str, params: Optional[Mapping[str, int]] = None) -> Node:
    """Resolved, fully expanded tree for ``tree_id``."""
    out = expand_multiplicity(resolve(library, tree_id, params))
    if out is None:
        return Gate("AND", (), library[tree_id].title)
    return out


def leaves(node: Node) -> List[Leaf]:
    if isinstance(node, Leaf):
        return [node]
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    return [l for c in node.children for l in leaves(c)]


def check_tree(node: Node):
    """Expanded trees must carry unique leaf ids (acyclic after resolution)."""
    ids = [l.id for l in leaves(node)]
    if len(ids) != len(set(ids)) or "" in ids:
        raise AnalysisError("leaf ids must be unique and non-empty; expand the tree first")


# library

LIBRARY_IDS = tuple("abcdefghijk") + tuple("ABCDEFGHIJK")


def load_revault_library(path: Optional[str] = None) -> Dict[str, TreeDef]:
    """The 11 common sub-trees and 11 attack trees shipped as DSL files."""
    trees: Dict[str, TreeDef] = {}
    if path is None:
        base = resources.files("covault") / "data" / "trees"
        files = sorted((p for p in base.iterdir() if p.name.endswith(".tree")), key=lambda p: p.name)
        texts = [p.read_text() for p in files]
    else:
        import pathlib
        texts = [p.read_text() for p in sorted(pathlib.Path(path).glob("*.tree"))]
    for text in texts:
        for tid, t in parse_trees(text).items():
            if tid in trees:
                raise AnalysisError(f"duplicate tree {tid}")
            trees[tid] = t
    for tid in trees:
        reachable(trees, tid)
    return trees


# attributes and profiles


def random_attributes(node: Node, seed: int, max_cost: int = 100, max_time: int = 50) -> Dict[str, Attributes]:
    """Seeded integer cost/time and two-decimal probability per leaf id."""
    rng = random.Random(seed)
    out = {}
    for l in leaves(node):
        out[l.id] = Attributes(rng.randint(1, max_cost), rng.randint(1, max_time), rng.randint(1, 100) / 100)
    return out


def attach_attributes(node: Node, attrs: Mapping[str, Attributes]) -> Node:
    """Set leaf attributes by leaf id, falling back to label."""
    if isinstance(node, Leaf):
        a = attrs.get(node.id) or attrs.get(node.label) or node.attrs
        return replace(node, attrs=a)
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    return replace(node, children=tuple(attach_attributes(c, attrs) for c in node.children))


@dataclass(frozen=True)
class AttackerProfile:
    budget: float = math.inf
    time_budget: float = math.inf
    capabilities: Optional[FrozenSet[str]] = None  # None: every tag allowed


def prune(node: Node, profile: AttackerProfile) -> Optional[Node]:
    """Drop leaves the attacker cannot perform; None if the root is lost."""
    if isinstance(node, Leaf):
        if profile.capabilities is not None and not set(node.tags) <= set(profile.capabilities):
            return None
        if node.attrs is not None and (node.attrs.cost > profile.budget or node.attrs.time > profile.time_budget):
            return None
        return node
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    kids = [prune(c, profile) for c in node.children]
    if node.kind == "OR":
        kids = [k for k in kids if k is not None]
        return replace(node, children=tuple(kids)) if kids else None
    if any(k is None for k in kids):
        return None
    return replace(node, children=tuple(kids))


# bottom-up evaluation

QUERIES = ("min_cost", "max_prob_under_budget", "min_time")


@dataclass
class EvalResult:
    query: str
    value: float
    scenario: FrozenSet[str]
    order: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        v = self.value
        return {"query": self.query, "value": v if math.isfinite(v) else None,
                "scenario": sorted(self.scenario), "order": list(self.order)}


def _attrs(l: Leaf) -> Attributes:
    if l.attrs is None:
        raise AnalysisError(f"leaf {l.id or l.label!r} has no attributes")
    return l.attrs


def _pareto(points: Iterable[Tuple[float, float, FrozenSet[str]]], budget: float):
    """Keep (cost, prob) points within budget that no cheaper point beats."""
    best: Dict[float, Tuple[float, FrozenSet[str]]] = {}
    for c, p, s in points:
        if c > budget + 1e-9:
            continue
        cur = best.get(c)
        if cur is None or p > cur[0] or (p == cur[0] and sorted(s) < sorted(cur[1])):
            best[c] = (p, s)
    out, top = [], -1.0
    for c in sorted(best):
        p, s = best[c]
        if p > top:
            out.append((c, p, s))
            top = p
    return out


def _front(n: Node, budget: float):
    if isinstance(n, Leaf):
        a = _attrs(n)
        return _pareto([(a.cost, a.prob, frozenset([n.id]))], budget)
    if isinstance(n, Ref):
        raise BadReference(f"unresolved reference {n.target}")
    fronts = [_front(c, budget) for c in n.children]
    if n.kind == "OR":
        return _pareto([pt for f in fronts for pt in f], budget)
    acc = [(0.0, 1.0, frozenset())]
    for f in fronts:
        acc = _pareto(((c1 + c2, p1 * p2, s1 | s2) for c1, p1, s1 in acc for c2, p2, s2 in f), budget)
    return acc


def _min_cost(n: Node) -> Tuple[float, FrozenSet[str]]:
    if isinstance(n, Leaf):
        return _attrs(n).cost, frozenset([n.id])
    if isinstance(n, Ref):
        raise BadReference(f"unresolved reference {n.target}")
    subs = [_min_cost(c) for c in n.children]
    if n.kind == "OR":
        return min(subs, key=lambda cs: (cs[0], sorted(cs[1])))
    return sum(c for c, _ in subs), frozenset().union(*[s for _, s in subs])


def _min_time(n: Node) -> Tuple[float, FrozenSet[str]]:
    if isinstance(n, Leaf):
        return _attrs(n).time, frozenset([n.id])
    if isinstance(n, Ref):
        raise BadReference(f"unresolved reference {n.target}")
    subs = [_min_time(c) for c in n.children]
    if n.kind == "OR":
        return min(subs, key=lambda ts: (ts[0], sorted(ts[1])))
    times = [t for t, _ in subs]
    total = sum(times) if n.kind == "SAND" else max(times, default=0.0)
    return total, frozenset().union(*[s for _, s in subs])


def scenario_order(node: Node, scenario: FrozenSet[str]) -> Tuple[str, ...]:
    """Leaves of a scenario in tree order, which respects SAND sequencing."""
    return tuple(l.id for l in leaves(node) if l.id in scenario)


def eval_tree(node: Optional[Node], query: str, budget: float = math.inf,
              profile: Optional[AttackerProfile] = None) -> EvalResult:
    """Aggregate leaf attributes bottom-up. OR picks the best child; AND and
    SAND sum cost and multiply probability (independent leaves); time is the
    max over AND children and the sum over SAND children."""
    if query not in QUERIES:
        raise AnalysisError(f"unknown query {query}")
    if node is not None and profile is not None:
        node = prune(node, profile)
        budget = min(budget, profile.budget)
    worst = 0.0 if query == "max_prob_under_budget" else math.inf
    if node is None:
        return EvalResult(query, worst, frozenset())
    if query == "min_cost":
        v, s = _min_cost(node)
    elif query == "min_time":
        v, s = _min_time(node)
    else:
        front = _pareto(_front(node, budget), budget)
        if not front:
            return EvalResult(query, 0.0, frozenset())
        c, v, s = max(front, key=lambda pt: (pt[1], -pt[0]))
    return EvalResult(query, v, s, scenario_order(node, s))


# cutset oracle


def count_cutsets(node: Node) -> int:
    if isinstance(node, Leaf):
        return 1
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    counts = [count_cutsets(c) for c in node.children]
    if node.kind == "OR":
        return sum(counts)
    return math.prod(counts)


def enumerate_cutsets(node: Node, limit: int = 2_000_000) -> List[FrozenSet[str]]:
    """All minimal attack scenarios of an expanded tree, as leaf-id sets.

    Leaves are unique after expansion, so OR unions and AND products never
    create duplicates or supersets of other results.
    """
    if isinstance(node, Ref):
        raise BadReference(f"unresolved reference {node.target}")
    n = count_cutsets(node)
    if n > limit:
        raise TooManyCutsets(f"{n} cutsets exceed the limit {limit}")
    return list(_cutsets(node))


def _cutsets(node: Node) -> Iterator[FrozenSet[str]]:
    if isinstance(node, Leaf):
        yield frozenset([node.id])
        return
    if node.kind == "OR":
        for c in node.children:
            yield from _cutsets(c)
        return
    parts = [list(_cutsets(c)) for c in node.children]
    for combo in itertools.product(*parts):
        yield frozenset().union(*combo)


def satisfied(node: Node, enabled: FrozenSet[str]) -> bool:
    if isinstance(node, Leaf):
        return node.id in enabled
    if node.kind == "OR":
        return any(satisfied(c, enabled) for c in node.children)
    return all(satisfied(c, enabled) for c in node.children)


def brute_force_cutsets(node: Node, max_leaves: int = 24) -> List[FrozenSet[str]]:
    """Minimal satisfying leaf subsets by exhaustive search (small trees only)."""
    ids = [l.id for l in leaves(node)]
    if len(ids) > max_leaves:
        raise TooManyCutsets(f"{len(ids)} leaves exceed {max_leaves}")
    sat = []
    for r in range(len(ids) + 1):
        for combo in itertools.combinations(ids, r):
            s = frozenset(combo)
            if any(m <= s for m in sat):
                continue
            if satisfied(node, s):
                sat.append(s)
    return sat


def _time_with(node: Node, enabled: FrozenSet[str]) -> float:
    if isinstance(node, Leaf):
        return _attrs(node).time if node.id in enabled else math.inf
    ts = [_time_with(c, enabled) for c in node.children]
    if node.kind == "OR":
        return min(ts)
    if node.kind == "SAND":
        return sum(ts)
    return max(ts, default=0.0)


def _cutset_points(node: Node, cuts: Iterable[FrozenSet[str]], query: str):
    attrs = {l.id: _attrs(l) for l in leaves(node)}
    timed = query == "min_time"
    for c in cuts:
        yield (sum(attrs[i].cost for i in c), math.prod(attrs[i].prob for i in c),
               _time_with(node, c) if timed else 0.0, c)


def _collapse(node: Node, query: str, budget: float, limit: int) -> Node:
    """Replace a sub-tree by an OR of macro-leaves, one per optimal cutset."""
    pts = list(_cutset_points(node, enumerate_cutsets(node, limit), query))
    tag = leaves(node)[0].id + "*"
    if query == "min_cost":
        best = min(pts, key=lambda p: (p[0], sorted(p[3])))
        keep = [(best[0], 1.0, 0.0)]
    elif query == "min_time":
        best = min(pts, key=lambda p: (p[2], sorted(p[3])))
        keep = [(0.0, 1.0, best[2])]
    else:
        keep = [(c, p, 0.0) for c, p, _ in _pareto(((c, p, cut) for c, p, _, cut in pts), budget)]
        if not keep:
            keep = [(math.inf, 0.0, 0.0)]
    kids = tuple(Leaf(f"{node.label or 'sub-tree'} option {k}", Attributes(c, t, p), id=f"{tag}{k}")
                 for k, (c, p, t) in enumerate(keep))
    return kids[0] if len(kids) == 1 else Gate("OR", kids, node.label)


def _reduce(node: Node, query: str, budget: float, limit: int) -> Node:
    if isinstance(node, Leaf) or count_cutsets(node) <= limit:
        return node
    kids = [_reduce(c, query, budget, limit) for c in node.children]
    node = replace(node, children=tuple(kids))
    while count_cutsets(node) > limit:
        counts = [count_cutsets(c) for c in node.children]
        k = max(range(len(counts)), key=lambda x: counts[x])
        if isinstance(node.children[k], Leaf) or counts[k] <= 1:
            break
        before = counts[k]
        kids = list(node.children)
        kids[k] = _collapse(kids[k], query, budget, limit)
        node = replace(node, children=tuple(kids))
        if count_cutsets(node.children[k]) >= before:
            break
    return node


def oracle_eval(node: Node, query: str, budget: float = math.inf, limit: int = 2_000) -> float:
    """Evaluate a query by scanning explicit minimal cutsets.

    Sub-trees with more than ``limit`` cutsets are first enumerated on their
    own and replaced by macro-leaves holding their optimal cutsets, so the
    search stays exact while the scanned sets stay small.
    """
    if query not in QUERIES:
        raise AnalysisError(f"unknown query {query}")
    small = _reduce(node, query, budget, limit)
    cuts = enumerate_cutsets(small, max(limit, count_cutsets(small)))
    pts = list(_cutset_points(small, cuts, query))
    if query == "min_cost":
        return min((p[0] for p in pts), default=math.inf)
    if query == "min_time":
        return min((p[2] for p in pts), default=math.inf)
    return max((p[1] for p in pts if p[0] <= budget + 1e-9), default=0.0)


# parameter sets used to cross-check the library against the oracle (N <= 3)
ORACLE_PARAMS: Dict[str, Dict[str, int]] = {
    "i": {"N": 3, "A": 2, "B": 1},
    "j": {"N": 3, "K": 2},
    "B": {"N": 2, "A": 1, "B": 1, "D": 2},
    "C": {"N": 2, "A": 1, "B": 1, "K": 2, "U": 2},
    "D": {"N": 3, "A": 2, "B": 1, "K": 2, "U": 2},
    "E": {"N": 3, "A": 3, "B": 0, "K": 2, "U": 2, "S": 1},
    "G": {"E": 2},
    "I": {"N": 3},
    "K": {"M": 3, "K": 2, "A": 1, "B": 1, "C": 0},
}


def oracle_params(tree_id: str) -> Dict[str, int]:
    return dict(ORACLE_PARAMS.get(tree_id, {}))


# privacy observer

EDGE_KINDS = ("same-sequence", "change-reuse", "enforcement-key-reuse", "internal-key-reuse")


@dataclass
class CorrelationGraph:
    nodes: List[str] = field(default_factory=list)
    edges: List[Tuple[str, str, str]] = field(default_factory=list)
    clusters: Dict[str, int] = field(default_factory=dict)

    def add_node(self, n: str):
        if n not in self._index:
            self._index[n] = len(self.nodes)
            self.nodes.append(n)

    def add_edge(self, a: str, b: str, kind: str):
        if kind not in EDGE_KINDS:
            raise AnalysisError(f"unknown edge kind {kind}")
        self.add_node(a)
        self.add_node(b)
        e = (a, b, kind) if a <= b else (b, a, kind)
        if e not in self._edge_set:
            self._edge_set.add(e)
            self.edges.append(e)

    def __post_init__(self):
        self._index: Dict[str, int] = {n: i for i, n in enumerate(self.nodes)}
        self._edge_set = set(self.edges)

    def edges_of(self, kind: str) -> List[Tuple[str, str, str]]:
        return [e for e in self.edges if e[2] == kind]

    def compute_clusters(self):
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b, _ in self.edges:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        roots: Dict[str, int] = {}
        self.clusters = {}
        for n in self.nodes:
            r = find(n)
            roots.setdefault(r, len(roots))
            self.clusters[n] = roots[r]

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "edges": [list(e) for e in self.edges],
                "clusters": dict(self.clusters)}


@dataclass
class Detection:
    kind: str  # "honest" or "reject"
    txids: Tuple[str, ...]  # deposit, withdrawal, spend or reject
    outputs: Tuple[str, ...]  # vault output, unvault output
    scripts: Tuple[str, ...]  # revealed leaf shapes (receive, vault, unvault spends)
    enforcement_keys: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "txids": list(self.txids), "outputs": list(self.outputs),
                "scripts": list(self.scripts), "enforcement_keys": list(self.enforcement_keys)}


def _op_str(op: Outpoint) -> str:
    return f"{op[0].hex()}:{op[1]}"


@dataclass
class _Spend:
    tx: txmodel.Transaction
    index: int
    leaf: taproot.TapLeaf
    cb: taproot.ControlBlock
    shape: str


def _public_view(chain: Chain):
    """Confirmed transactions in block order and the spend index, using only
    what any full node sees."""
    from .ajolote import classify_leaf

    txs = [tx for b in chain.blocks for tx in b.txs]
    spends: Dict[Outpoint, _Spend] = {}
    creators: Dict[bytes, txmodel.Transaction] = {tx.txid: tx for tx in txs}
    creators.update({tx.txid: tx for b in chain.blocks for tx in b.mints})
    for tx in txs:
        for idx, wit in enumerate(tx.witnesses):
            if idx >= len(tx.inputs):
                continue
            try:
                _, leaf, cb, _ = taproot.split_script_path_witness(wit)
            except Exception:
                continue
            spends[tx.inputs[idx].outpoint] = _Spend(tx, idx, leaf, cb, classify_leaf(leaf.script))
    return txs, spends, creators


def observer_scan(chain: Chain) -> Tuple[List[Detection], CorrelationGraph]:
    """Find receive -> vault -> unvault output chains by revealed tapscript
    shapes and build the correlation graph."""
    txs, spends, creators = _public_view(chain)
    graph = CorrelationGraph()
    detections: List[Detection] = []
    for op, sp in spends.items():
        if sp.shape not in ("chain4", "enf-multi"):
            continue
        wit_tx = sp.tx
        if len(wit_tx.inputs) != 1 or len(wit_tx.outputs) != 1:
            continue
        dep = creators.get(op[0])
        if dep is None:
            continue
        # the deposit must spend receive-shaped outputs only
        dep_spends = [spends.get(i.outpoint) for i in dep.inputs]
        if not dep_spends or any(s is None or s.shape not in ("chain2", "multi") for s in dep_spends):
            continue
        unv = (wit_tx.txid, 0)
        nxt = spends.get(unv)
        if nxt is None:
            continue
        keys = [k.hex() for k in sp.leaf.script.keys()]
        if nxt.shape in ("chain2-csv", "multi-csv"):
            kind = "honest"
        elif nxt.shape == "chain3":
            e = set(k.hex() for k in nxt.leaf.script.keys()[:2])
            if not e <= set(keys):
                continue
            kind = "reject"
        else:
            continue
        enf = tuple(k.hex() for k in nxt.leaf.script.keys()[:2]) if kind == "reject" else ()
        det = Detection(kind, (dep.txid.hex(), wit_tx.txid.hex(), nxt.tx.txid.hex()), (_op_str(op), _op_str(unv)),
                        (dep_spends[0].shape, sp.shape, nxt.shape), enf)
        detections.append(det)
        for i in dep.inputs:
            graph.add_edge(_op_str(i.outpoint), _op_str(op), "same-sequence")
        graph.add_edge(_op_str(op), _op_str(unv), "same-sequence")
        if kind == "reject":
            graph.add_edge(_op_str(op), _op_str(unv), "enforcement-key-reuse")
        for k, out in enumerate(nxt.tx.outputs):
            graph.add_edge(_op_str(unv), _op_str((nxt.tx.txid, k)), "same-sequence")
    # change reuse: an output of a detected spend later consumed by a detected deposit
    produced = {}
    for d in detections:
        spend_txid = bytes.fromhex(d.txids[2])
        for k in range(len(creators[spend_txid].outputs)):
            produced[(spend_txid, k)] = d
    for d in detections:
        dep = creators[bytes.fromhex(d.txids[0])]
        for i in dep.inputs:
            if i.outpoint in produced:
                graph.add_edge(_op_str(i.outpoint), d.outputs[0], "change-reuse")
    # internal-key reuse across script-path spends; the standard NUMS point is
    # shared by everyone and identifies nothing
    first_by_key: Dict[bytes, str] = {}
    nums = taproot.NUMS.data
    for op, sp in sorted(spends.items()):
        k = sp.cb.internal_key.data
        if k == nums:
            continue
        node = _op_str(op)
        if k in first_by_key:
            graph.add_edge(first_by_key[k], node, "internal-key-reuse")
        else:
            first_by_key[k] = node
    graph.compute_clusters()
    detections.sort(key=lambda d: d.txids)
    return detections, graph


# observer corpus


@dataclass
class Corpus:
    chain: Chain
    planted: List[Tuple[str, Tuple[str, str, str]]]  # (kind, (dep, wit, next) txids)
    noise_txids: List[str]


def _noise_tx(chain: Chain, rng: random.Random, label: str):
    """One synthetic non-vault transaction: key spends, 2-of-2 or 3-of-3
    tapscript spends and threshold spends, all with random internal keys."""
    from .covenant import key_output, key_witness
    kind = rng.choice(("key", "tap2", "tap3", "multi", "tap2csv"))
    kp = crypto.keypair_from_label(f"noise/{label}/owner")
    amount = rng.randint(50_000, 5_000_000)
    if kind == "key":
        op = chain.fund(key_output(kp.pub), amount)
        tx = txmodel.Transaction(2, (txmodel.TxInput(op[0], op[1]),),
                                 (txmodel.TxOutput(amount - 2_000, key_output(kp.pub)),))
        prev = [txmodel.TxOutput(amount, key_output(kp.pub))]
        sig = txmodel.sign_input(tx, 0, kp.priv, txmodel.Semantics.TAPROOT, txmodel.ALL, prev)
        return tx.with_witness(0, key_witness(sig, kp.pub))
    names = {"tap2": ["X1", "X2"], "tap3": ["X1", "X2", "X3"], "multi": ["X1", "X2", "X3"],
             "tap2csv": ["X1", "X2"]}[kind]
    if kind == "multi":
        pol = script.thresh(2, *names)
    elif kind == "tap2csv":
        pol = script.and_(script.thresh(2, *names), script.Older(rng.randint(1, 3)))
    else:
        pol = script.thresh(len(names), *names)
    keys = {n: crypto.keypair_from_label(f"noise/{label}/{n}") for n in names}
    leaf = taproot.TapLeaf(script.compile(pol, {n: k.pub for n, k in keys.items()}), policy=pol)
    other = taproot.TapLeaf(script.compile(script.pk("X1"), {"X1": keys["X1"].pub}))
    tree = taproot.TapBranch(leaf, other)
    P = crypto.keypair_from_label(f"noise/{label}/internal").pub
    spk = taproot.output_key(P, tree).script_pubkey
    op = chain.fund(spk, amount)
    age = max(script.locks_of(pol) or [0])
    seq = txmodel.encode_relative_lock(age) if age else txmodel.SEQUENCE_FINAL
    tx = txmodel.Transaction(2, (txmodel.TxInput(op[0], op[1], seq),),
                             (txmodel.TxOutput(amount - 3_000, key_output(kp.pub)),))
    prev = [txmodel.TxOutput(amount, spk)]
    sigs = {n: txmodel.sign_input(tx, 0, k.priv, txmodel.Semantics.TAPROOT, txmodel.ALL, prev)
            for n, k in keys.items()}
    ctx = script.SatisfactionContext(signer=lambda n: sigs.get(n), age=age)
    stack = script.satisfy(pol, ctx)
    cb = taproot.prove_inclusion(tree, leaf, P)
    return tx.with_witness(0, taproot.script_path_witness(stack.stack, leaf, cb)), age


def build_observer_corpus(seed: int = 0, n_sequences: int = 50, n_noise: int = 500,
                          reject_every: int = 5) -> Corpus:
    """Plant Ajolote sequences (every ``reject_every``-th one cancelled by a
    watchtower) among synthetic non-vault transactions on one chain."""
    from . import ajolote as aj
    rng = random.Random(seed)
    cfg = aj.Config(2, 1_000_000, 20_000_000, 1, aj.WithdrawalConstraints(10_000, 1))
    world = aj.World.create(cfg, seed)
    if not aj.setup_world(world)[-1].ok:
        raise AnalysisError("corpus setup failed")
    chain = world.chain
    planted = []
    noise: List[str] = []
    delayed: List[Tuple[txmodel.Transaction, int]] = []
    per_seq = max(1, n_noise // max(n_sequences, 1))
    noise_left = n_noise

    def emit_noise(k: int):
        nonlocal noise_left
        for _ in range(min(k, noise_left)):
            res = _noise_tx(chain, rng, f"{seed}/{n_noise - noise_left}")
            tx, age = res if isinstance(res, tuple) else (res, 0)
            if age:
                delayed.append((tx, chain.height + 1 + age))
            elif chain.submit(tx):
                noise.append(tx.txid.hex())
            noise_left -= 1

    def flush_delayed():
        for tx, h in list(delayed):
            if chain.height + 1 >= h:
                if chain.submit(tx):
                    noise.append(tx.txid.hex())
                delayed.remove((tx, h))

    for s in range(n_sequences):
        amount = rng.randint(2, 10) * 1_000_000
        balance = sum(c.amount for c in world.coins.values() if c.i == world.mobile.i)
        if balance < amount + 100_000:
            aj.run_ceremony(world, "receive", amount=amount + 100_000 - balance + rng.randint(0, 500_000))
        emit_noise(per_seq // 2)
        world.advance(1)
        flush_delayed()
        dep = aj.run_ceremony(world, "vault_deposit", amounts=[amount])
        if not dep.ok:
            raise AnalysisError(f"corpus deposit failed: {dep.abort}")
        v = dep.data["vaults"][0]
        wd = aj.run_ceremony(world, "withdraw", v=v)
        if not wd.ok:
            raise AnalysisError(f"corpus withdrawal failed: {wd.abort}")
        emit_noise(per_seq - per_seq // 2)
        world.advance(1)
        flush_delayed()
        if (s + 1) % reject_every == 0:
            r = aj.run_ceremony(world, "reject", v=v, k=1)
            nxt = r.data.get("tx_fb")
            kind = "reject"
        else:
            world.advance(cfg.T)
            r = aj.run_ceremony(world, "spend", v=v, amount=amount // 2)
            nxt = r.data.get("tx_spend")
            kind = "honest"
        if not r.ok:
            raise AnalysisError(f"corpus {kind} failed: {r.abort}")
        world.advance(1)
        flush_delayed()
        planted.append((kind, (dep.data["tx_dep"].hex(), wd.data["tx_wit"].hex(), nxt.hex())))
    emit_noise(noise_left)
    for _ in range(4):
        world.advance(1)
        flush_delayed()
    return Corpus(chain, planted, noise)


def score_detections(detections: Sequence[Detection], corpus: Corpus) -> dict:
    truth = {p[1]: p[0] for p in corpus.planted}
    found = {d.txids: d.kind for d in detections}
    tp = sum(1 for k, kind in found.items() if truth.get(k) == kind)
    recall = tp / len(truth) if truth else 1.0
    precision = tp / len(found) if found else 1.0
    return {"planted": len(truth), "detected": len(found), "true_positives": tp,
            "recall": recall, "precision": precision, "noise_txs": len(corpus.noise_txids)}
