"""Articles, passages, knowledge-graph triples, and per-question passage graphs.

Articles are chunked into disjoint 100-word passages (the retrieval unit).
Each article aligns to at most one KG entity; two retrieved passages are
connected exactly when their aligned entities share a triple in either
direction. Graphs are built per question over the retrieved set only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PASSAGE_WORDS = 100


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class Passage:
    passage_id: int
    article_id: str
    title: str
    text: str

    @property
    def word_count(self) -> int:
        return len(self.text.split())


@dataclass
class KnowledgeGraph:
    entities: set[str] = field(default_factory=set)
    relations: set[str] = field(default_factory=set)
    triples: set[tuple[str, str, str]] = field(default_factory=set)
    _adjacency: dict[str, set[str]] = field(default_factory=dict, repr=False)

    def add_triple(self, head: str, relation: str, tail: str) -> None:
        self.entities.add(head)
        self.entities.add(tail)
        self.relations.add(relation)
        self.triples.add((head, relation, tail))
        self._adjacency.setdefault(head, set()).add(tail)
        self._adjacency.setdefault(tail, set()).add(head)

    def connected(self, e1: str, e2: str) -> bool:
        """True iff some triple links e1 and e2, in either direction."""
        return e2 in self._adjacency.get(e1, ())

    def neighbors(self, entity: str) -> set[str]:
        return set(self._adjacency.get(entity, ()))

    def stats(self) -> dict:
        return {
            "n_entities": len(self.entities),
            "n_relations": len(self.relations),
            "n_triples": len(self.triples),
        }


@dataclass
class EntityAlignment:
    article_to_entity: dict[str, str] = field(default_factory=dict)

    def entity_for(self, article_id: str) -> str | None:
        return self.article_to_entity.get(article_id)

    def __len__(self) -> int:
        return len(self.article_to_entity)


@dataclass
class PassageGraph:
    """Adjacency over one question's retrieved passages, in rank order."""

    passage_ids: list[int]
    edges: list[tuple[int, int]]  # node-index pairs, i < j, sorted, unique
    article_ids: list[str] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.passage_ids)

    def neighbor_sets(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in self.passage_ids]
        for i, j in self.edges:
            out[i].add(j)
            out[j].add(i)
        return out


# -- chunking -------------------------------------------------------------------


def chunk_article(article_id: str, title: str, body: str, start_id: int = 0) -> list[Passage]:
    """Greedy 100-word chunks; the final chunk may be shorter, never empty."""
    words = body.split()
    if not words:
        raise ValueError(f"article {article_id!r} has an empty body")
    passages = []
    for k, pos in enumerate(range(0, len(words), PASSAGE_WORDS)):
        chunk = " ".join(words[pos : pos + PASSAGE_WORDS])
        passages.append(Passage(start_id + k, article_id, title, chunk))
    return passages


def build_passages(articles: Iterable[tuple[str, str, str]]) -> list[Passage]:
    """Chunk (article_id, title, body) records with globally sequential ids."""
    out: list[Passage] = []
    for article_id, title, body in articles:
        out.extend(chunk_article(article_id, title, body, start_id=len(out)))
    return out


# -- file loaders -----------------------------------------------------------------


def load_corpus(path: str | Path) -> list[tuple[str, str, str]]:
    """JSONL corpus: one {"article_id","title","text"} object per line."""
    articles = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                articles.append((rec["article_id"], rec["title"], rec["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(path, line_no, f"bad corpus record: {exc}") from exc
    return articles


def load_kg(triples_path: str | Path, entities_path: str | Path | None = None) -> KnowledgeGraph:
    """TSV triples `head<TAB>relation<TAB>tail`; entities file optional.

    Entities referenced only by triples are auto-registered; an entities
    file (one id per line) additionally declares isolated entities.
    """
    kg = KnowledgeGraph()
    if entities_path is not None:
        with open(entities_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                entity = line.strip()
                if entity:
                    kg.entities.add(entity)
    with open(triples_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(triples_path, line_no, f"expected head<TAB>relation<TAB>tail, got {line!r}")
            kg.add_triple(parts[0].strip(), parts[1].strip(), parts[2].strip())
    return kg


def load_alignment(path: str | Path, kg: KnowledgeGraph | None = None) -> EntityAlignment:
    """TSV `article_id<TAB>entity_id`; validates targets against ``kg`` if given."""
    align = EntityAlignment()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(p.strip() for p in parts):
                raise ParseError(path, line_no, f"expected article_id<TAB>entity_id, got {line!r}")
            article_id, entity_id = parts[0].strip(), parts[1].strip()
            if article_id in align.article_to_entity:
                raise ParseError(path, line_no, f"article {article_id!r} aligned twice")
            if kg is not None and entity_id not in kg.entities:
                raise ParseError(path, line_no, f"alignment target {entity_id!r} not in KG")
            align.article_to_entity[article_id] = entity_id
    return align


# -- passage-graph construction ----------------------------------------------------


def build_passage_graph(
    retrieved: Sequence[Passage],
    kg: KnowledgeGraph,
    align: EntityAlignment,
    connect_same_entity: bool = False,
) -> PassageGraph:
    """Edge (i, j) iff the aligned entities of passages i and j share a triple.

    Same-entity passages (same article) are connected only when a self-triple
    exists, unless ``connect_same_entity`` forces the edge.
    """
    missing = sorted({p.article_id for p in retrieved if align.entity_for(p.article_id) is None})
    if missing:
        raise ValueError(f"passages with unaligned articles: {missing}")
    entities = [align.entity_for(p.article_id) for p in retrieved]
    edges = []
    for i in range(len(retrieved)):
        for j in range(i + 1, len(retrieved)):
            if entities[i] == entities[j]:
                if connect_same_entity or kg.connected(entities[i], entities[j]):
                    edges.append((i, j))
            elif kg.connected(entities[i], entities[j]):
                edges.append((i, j))
    return PassageGraph(
        passage_ids=[p.passage_id for p in retrieved],
        edges=sorted(edges),
        article_ids=[p.article_id for p in retrieved],
    )


def graph_stats(graphs: Sequence[PassageGraph], few_edge_threshold: int = 1) -> dict:
    """Edge-count and distinct-article histograms plus trivia-situation rates.

    The two degenerate situations: every retrieved passage comes from a
    single article, or the graph has fewer than ``few_edge_threshold`` edges.
    """
    if not graphs:
        raise ValueError("graph_stats needs at least one graph")
    edge_hist: dict[int, int] = {}
    article_hist: dict[int, int] = {}
    single_article = 0
    few_edges = 0
    for g in graphs:
        n_edges = len(g.edges)
        n_articles = len(set(g.article_ids)) if g.article_ids else 0
        edge_hist[n_edges] = edge_hist.get(n_edges, 0) + 1
        article_hist[n_articles] = article_hist.get(n_articles, 0) + 1
        if n_articles <= 1:
            single_article += 1
        if n_edges < few_edge_threshold:
            few_edges += 1
    n = len(graphs)
    return {
        "n_graphs": n,
        "edge_count_hist": {str(k): v for k, v in sorted(edge_hist.items())},
        "distinct_article_hist": {str(k): v for k, v in sorted(article_hist.items())},
        "frac_single_article": single_article / n,
        "frac_few_edges": few_edges / n,
        "few_edge_threshold": few_edge_threshold,
    }
