"""Language family trees and similarity-driven source selection.

A tree is a rooted hierarchy of named nodes; leaves carry unique language
codes. Similarity of a language l to a target set is the sum over targets
of the depth of their lowest common ancestor with l — languages that share
deep branches with the targets score high. Source selection ranks a
candidate pool by that score.

Serialized form: JSON of nested ``{"name": ..., "code": ..., "children":
[...]}`` objects, code only on leaves.
"""

import json
from dataclasses import dataclass, field


class UnknownNodeError(KeyError):
    """Queried a node id, name, or code the tree does not contain."""


class TreeFormatError(ValueError):
    """The node list or JSON document violates tree structure rules."""


class InsufficientCandidatesError(ValueError):
    """Asked for more sources than the eligible candidate pool holds."""


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    code: str | None
    parent: int | None


@dataclass(frozen=True)
class SelectionRequest:
    """Inputs of one source-selection query.

    ``targets`` are the languages to adapt to, ``candidates`` the pool the
    sources may come from (targets inside it are excluded), ``m`` how many
    to pick.
    """

    targets: frozenset
    candidates: frozenset
    m: int

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))
        object.__setattr__(self, "candidates", frozenset(self.candidates))
        if not self.targets:
            raise ValueError("need at least one target language")
        if self.m < 1:
            raise ValueError("m must be positive")
        eligible = self.candidates - self.targets
        if self.m > len(eligible):
            raise InsufficientCandidatesError(
                f"asked for {self.m} sources but only {len(eligible)} eligible candidates"
            )


class LanguageTree:
    """Read-only after construction; queries are safe to share across threads."""

    def __init__(self, nodes):
        self._nodes = {}
        self._children = {}
        roots = []
        for n in nodes:
            if n.id in self._nodes:
                raise TreeFormatError(f"duplicate node id {n.id}")
            self._nodes[n.id] = n
            self._children.setdefault(n.id, [])
        for n in nodes:
            if n.parent is None:
                roots.append(n.id)
            elif n.parent not in self._nodes:
                raise TreeFormatError(f"node {n.id} has unknown parent {n.parent}")
            else:
                self._children[n.parent].append(n.id)
        if len(roots) != 1:
            raise TreeFormatError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]

        # depth table doubles as the reachability / acyclicity check
        self._depth = {self.root: 0}
        stack = [self.root]
        while stack:
            nid = stack.pop()
            for c in self._children[nid]:
                if c in self._depth:
                    raise TreeFormatError("parent links form a cycle")
                self._depth[c] = self._depth[nid] + 1
                stack.append(c)
        if len(self._depth) != len(self._nodes):
            raise TreeFormatError("some nodes are unreachable from the root")

        self._by_code = {}
        for n in nodes:
            if n.code is None:
                continue
            if self._children[n.id]:
                raise TreeFormatError(f"code {n.code!r} sits on internal node {n.name!r}")
            if n.code in self._by_code:
                raise TreeFormatError(f"duplicate language code {n.code!r}")
            self._by_code[n.code] = n.id

    # -- construction -------------------------------------------------------

    @classmethod
    def from_json(cls, doc):
        """Build from a nested {name, code?, children[]} document."""
        nodes = []

        def walk(obj, parent):
            if not isinstance(obj, dict) or "name" not in obj:
                raise TreeFormatError("every tree node needs a 'name'")
            nid = len(nodes)
            nodes.append(Node(id=nid, name=obj["name"], code=obj.get("code"), parent=parent))
            for child in obj.get("children", []):
                walk(child, nid)

        walk(doc, None)
        return cls(nodes)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))

    # -- lookups ------------------------------------------------------------

    def node(self, nid):
        try:
            return self._nodes[nid]
        except KeyError:
            raise UnknownNodeError(f"no node with id {nid}") from None

    def node_id(self, key):
        """Resolve a language code (preferred) or a unique display name."""
        if key in self._by_code:
            return self._by_code[key]
        hits = [n.id for n in self._nodes.values() if n.name == key]
        if len(hits) == 1:
            return hits[0]
        if not hits:
            raise UnknownNodeError(f"no language code or node named {key!r}")
        raise UnknownNodeError(f"name {key!r} is ambiguous; use a code or id")

    def leaf_codes(self):
        return sorted(self._by_code)

    def children(self, nid):
        self.node(nid)
        return list(self._children[nid])

    # -- core queries -------------------------------------------------------

    def depth(self, nid):
        """Edges from the root; depth(root) = 0."""
        if nid not in self._depth:
            raise UnknownNodeError(f"no node with id {nid}")
        return self._depth[nid]

    def lca(self, a, b):
        """Deepest node that is an ancestor-or-self of both a and b."""
        da, db = self.depth(a), self.depth(b)
        while da > db:
            a = self._nodes[a].parent
            da -= 1
        while db > da:
            b = self._nodes[b].parent
            db -= 1
        while a != b:
            a = self._nodes[a].parent
            b = self._nodes[b].parent
        return a

    def sim(self, lang, targets):
        """Sum over targets of depth(lca(lang, target)); inputs are codes."""
        lid = self._leaf(lang)
        return sum(self.depth(self.lca(lid, self._leaf(t))) for t in targets)

    def select_sources(self, targets, candidates, m):
        """Top-``m`` candidates by similarity to ``targets``, best first.

        Targets are never returned even when listed as candidates. Ties
        break toward the lexicographically smaller code, so the result is
        one fixed list regardless of input ordering.
        """
        req = SelectionRequest(targets=targets, candidates=candidates, m=m)
        targets = sorted(req.targets)
        for t in targets:
            self._leaf(t)
        pool = sorted(req.candidates - req.targets)
        scored = [(-self.sim(c, targets), c) for c in pool]
        scored.sort()
        return [c for _, c in scored[: req.m]]

    def _leaf(self, code):
        try:
            return self._by_code[code]
        except KeyError:
            raise UnknownNodeError(f"no leaf with language code {code!r}") from None
