"""
Log template mining with a fixed-depth parse tree.

Messages are masked token by token, routed by token count and their first `depth - 2`
tokens to a leaf, and merged into the most similar template at that leaf when the share
of equal token positions reaches the similarity threshold. Positions that differ become
the wildcard `<*>`.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from ffad.config import MaskRule, ParseTreeConfig
from ffad.ingest.logs import RawLogLine

logger = logging.getLogger(__name__)

WILDCARD = "<*>"

_DIGIT = re.compile(r"\d")

RouteKey = Union[int, str]


@dataclass
class LogTemplate:
    """
    A message skeleton with wildcard slots.
    """

    id: int
    """Dense id in creation order."""
    tokens: List[str]
    """Template tokens; parameter slots are `<*>`."""
    count: int = 0
    """Number of lines matched so far."""
    route: List[RouteKey] = field(default_factory=list)
    """Parse tree path (token count, then prefix keys) of the template's leaf."""

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> Dict:
        return {"id": self.id, "tokens": self.tokens, "count": self.count, "route": self.route}


class _Node:
    __slots__ = ("children", "templates")

    def __init__(self):
        self.children: Dict[RouteKey, "_Node"] = {}
        self.templates: List[int] = []


def compile_rules(rules: Sequence[MaskRule]) -> List[Tuple[str, "re.Pattern", str]]:
    return [(r.name, re.compile(r.pattern), r.replacement) for r in rules]


def mask(text: str, rules: Optional[Sequence[MaskRule]] = None) -> List[str]:
    """
    Split a message on whitespace and replace every token fully matched by a rule with
    the rule's wildcard. Rules are tried in order; the first match wins.
    """
    if rules is None:
        rules = ParseTreeConfig().mask_rules
    return _mask_tokens(text, compile_rules(rules))


def _mask_tokens(text: str, compiled: List[Tuple[str, "re.Pattern", str]]) -> List[str]:
    tokens = []
    for token in text.split():
        for _, pattern, replacement in compiled:
            if pattern.fullmatch(token):
                token = replacement
                break
        tokens.append(token)
    return tokens


def _route_key(token: str) -> str:
    return WILDCARD if _DIGIT.search(token) else token


def similarity(tokens: Sequence[str], template: Sequence[str]) -> float:
    """
    Share of positions holding equal tokens. Sequences of different length score 0.
    """
    if len(tokens) != len(template) or not tokens:
        return 0.0
    return sum(a == b for a, b in zip(tokens, template)) / len(tokens)


class TemplateMiner:
    """
    Mutable parse tree that mines templates from a stream of messages.
    """

    def __init__(self, config: Optional[ParseTreeConfig] = None):
        self.config = config or ParseTreeConfig()
        self._rules = compile_rules(self.config.mask_rules)
        self._root = _Node()
        self.templates: List[LogTemplate] = []

    def mask(self, text: str) -> List[str]:
        return _mask_tokens(text, self._rules)

    def _descend(self, tokens: Sequence[str]) -> Tuple[_Node, List[RouteKey]]:
        length = len(tokens)
        node = self._root.children.setdefault(length, _Node())
        route: List[RouteKey] = [length]
        for token in tokens[: self.config.depth - 2]:
            key = _route_key(token)
            if key not in node.children:
                if len(node.children) >= self.config.max_children:
                    key = WILDCARD
                node.children.setdefault(key, _Node())
            node = node.children[key]
            route.append(key)
        return node, route

    def match_or_create(self, tokens: Sequence[str]) -> int:
        """
        Match masked tokens against the tree, merging into the best template at the
        leaf or creating a new one.

        Returns:
            The template id.
        """
        if not tokens:
            raise ValueError("Cannot match an empty token sequence")

        leaf, route = self._descend(tokens)

        best_id, best_sim = None, -1.0
        # Leaf ids are in creation order, so strict `>` breaks ties toward the lowest id.
        for tid in leaf.templates:
            sim = similarity(tokens, self.templates[tid].tokens)
            if sim > best_sim:
                best_id, best_sim = tid, sim

        if best_id is not None and best_sim >= self.config.sim_threshold:
            template = self.templates[best_id]
            template.tokens = [
                a if a == b else WILDCARD for a, b in zip(template.tokens, tokens)
            ]
            template.count += 1
            return best_id

        template = LogTemplate(id=len(self.templates), tokens=list(tokens), count=1, route=route)
        self.templates.append(template)
        leaf.templates.append(template.id)
        logger.debug("New template %d: %s", template.id, template.text)
        return template.id

    def add(self, text: str) -> int:
        return self.match_or_create(self.mask(text))

    def parse(self, lines: Iterable[RawLogLine]) -> List[int]:
        return [self.add(line.text) for line in lines]

    def freeze(self) -> "TemplateTable":
        return TemplateTable(self.templates, config=self.config)


class TemplateTable:
    """
    Immutable template table. Matching is read-only: lines that match no template map
    to the reserved `unknown_id`, one past the last template.
    """

    def __init__(
        self, templates: Sequence[LogTemplate], config: Optional[ParseTreeConfig] = None
    ):
        self.config = config or ParseTreeConfig()
        self._rules = compile_rules(self.config.mask_rules)
        self.templates: Tuple[LogTemplate, ...] = tuple(
            LogTemplate(t.id, list(t.tokens), t.count, list(t.route)) for t in templates
        )
        for ii, tpl in enumerate(self.templates):
            if tpl.id != ii:
                raise ValueError(f"Template ids must be dense; found id {tpl.id} at {ii}")

        self._root = _Node()
        for tpl in self.templates:
            node = self._root
            for key in tpl.route:
                node = node.children.setdefault(key, _Node())
            node.templates.append(tpl.id)

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def unknown_id(self) -> int:
        return len(self.templates)

    def match(self, tokens: Sequence[str]) -> int:
        """
        Best template id for masked tokens, or `unknown_id`.
        """
        if not tokens:
            return self.unknown_id
        node = self._root.children.get(len(tokens))
        for token in tokens[: self.config.depth - 2]:
            if node is None:
                break
            key = _route_key(token)
            node = node.children.get(key, node.children.get(WILDCARD))
        if node is None:
            return self.unknown_id

        best_id, best_sim = self.unknown_id, -1.0
        for tid in node.templates:
            sim = similarity(tokens, self.templates[tid].tokens)
            if sim > best_sim:
                best_id, best_sim = tid, sim
        if best_sim >= self.config.sim_threshold:
            return best_id
        return self.unknown_id

    def assign(self, lines: Iterable[RawLogLine]) -> List[int]:
        """
        Template id per line; unseen messages map to `unknown_id`.
        """
        ids = [self.match(_mask_tokens(line.text, self._rules)) for line in lines]
        unknown = sum(1 for i in ids if i == self.unknown_id)
        if unknown:
            logger.info("%d of %d lines matched no frozen template", unknown, len(ids))
        return ids

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [t.to_dict() for t in self.templates], columns=["id", "tokens", "count", "route"]
        )

    def to_jsonl(self, path: Union[str, Path]):
        """
        Write one JSON record per template.
        """
        self.to_frame().to_json(path, orient="records", lines=True)

    @classmethod
    def from_jsonl(
        cls, path: Union[str, Path], config: Optional[ParseTreeConfig] = None
    ) -> "TemplateTable":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Template table {path} does not exist")
        if not path.read_text().strip():
            return cls([], config=config)
        df = pd.read_json(path, lines=True, dtype=False)
        templates = [
            LogTemplate(
                id=int(row["id"]),
                tokens=list(row["tokens"]),
                count=int(row["count"]),
                route=[int(k) if ii == 0 else k for ii, k in enumerate(row["route"])],
            )
            for _, row in df.iterrows()
        ]
        return cls(templates, config=config)


def parse_corpus(
    lines: Sequence[RawLogLine], config: Optional[ParseTreeConfig] = None
) -> Tuple[TemplateTable, List[int]]:
    """
    Mine templates from a corpus.

    Returns:
        The frozen template table and the template id of every line.
    """
    miner = TemplateMiner(config)
    ids = miner.parse(lines)
    table = miner.freeze()
    logger.info("Parsed %d lines into %d templates", len(ids), len(table))
    return table, ids
