"""Seeded synthetic worlds: corpus, KG, alignment, and QA pairs.

One article per entity; entity graphs are Erdos-Renyi with a configurable
expected degree. Article text mixes entity-specific signature tokens with a
shared distractor pool. Each question plants a unique answer token into
exactly one passage of its gold article. With probability ``p_link`` the
question's keywords describe a KG-neighbor ("anchor") article instead of
the gold one, so the informative retrieval signal travels along a graph
edge — the structure the reranking stages are supposed to exploit.

All structural decisions branch on integer draws from a 64-bit Philox
counter-based generator, so worlds are reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .params import seeded_rng

_U32 = 2**32


@dataclass
class WorldConfig:
    seed: int = 0
    n_entities: int = 150
    avg_triples_per_entity: float = 4.0
    words_per_article: int = 250
    n_questions: int = 300
    distractor_strength: float = 0.35  # fraction of article words from the shared pool
    n_filler_tokens: int = 400
    sig_tokens_per_entity: int = 5
    p_link: float = 0.8
    n_relations: int = 16
    question_keywords: int = 3  # signature tokens describing the primary article
    answer_style: str = "plain"  # "trivia" capitalizes the target's first letter

    def __post_init__(self):
        if not (0.0 <= self.p_link <= 1.0):
            raise ValueError("p_link must be in [0, 1]")
        for name in ("n_entities", "words_per_article", "n_questions",
                     "n_filler_tokens", "sig_tokens_per_entity", "n_relations"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.avg_triples_per_entity < 0:
            raise ValueError("avg_triples_per_entity must be >= 0")
        if self.answer_style not in ("plain", "trivia"):
            raise ValueError("answer_style must be 'plain' or 'trivia'")


@dataclass
class World:
    cfg: WorldConfig
    entity_ids: list[str]
    article_ids: list[str]
    titles: list[str]
    article_words: list[list[str]]  # mutable until questions plant answers
    triples: list[tuple[str, str, str]]
    neighbors: list[list[int]]  # adjacency by entity index, sorted
    used_slots: set[tuple[int, int]] = field(default_factory=set)

    def alignment(self) -> dict[str, str]:
        return dict(zip(self.article_ids, self.entity_ids))


@dataclass
class QAItem:
    question_id: str
    question: str
    answers: list[str]
    gold_entity: int
    anchor_entity: int | None  # set when the keywords describe a neighbor

    def record(self) -> dict:
        return {"question_id": self.question_id, "question": self.question,
                "answers": self.answers}


def _entity_sig(entity: int, token: int) -> str:
    return f"e{entity:04d}sig{token}"


def _chance(rng, prob: float) -> bool:
    return int(rng.integers(0, _U32)) < int(prob * _U32)


def gen_world(cfg: WorldConfig) -> World:
    """Entity graph, triples, and per-entity articles; deterministic per seed."""
    rng = seeded_rng(cfg.seed, 10)
    n = cfg.n_entities
    entity_ids = [f"e{i:04d}" for i in range(n)]
    article_ids = [f"art{i:04d}" for i in range(n)]
    titles = [f"entity {i:04d}" for i in range(n)]

    edge_prob = min(1.0, cfg.avg_triples_per_entity / max(1, n - 1))
    triples = []
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if _chance(rng, edge_prob):
                relation = f"r{int(rng.integers(0, cfg.n_relations)):03d}"
                head, tail = (i, j) if rng.integers(0, 2) == 0 else (j, i)
                triples.append((entity_ids[head], relation, entity_ids[tail]))
                neighbors[i].add(j)
                neighbors[j].add(i)

    article_words = []
    for i in range(n):
        words = []
        for _ in range(cfg.words_per_article):
            if _chance(rng, cfg.distractor_strength):
                words.append(f"filler{int(rng.integers(0, cfg.n_filler_tokens)):03d}")
            else:
                words.append(_entity_sig(i, int(rng.integers(0, cfg.sig_tokens_per_entity))))
        article_words.append(words)

    return World(cfg, entity_ids, article_ids, titles, article_words,
                 triples, [sorted(s) for s in neighbors])


def _distinct_sigs(rng, entity: int, count: int, total: int) -> list[str]:
    count = min(count, total)
    chosen: list[int] = []
    while len(chosen) < count:
        pick = int(rng.integers(0, total))
        if pick not in chosen:
            chosen.append(pick)
    return [_entity_sig(entity, j) for j in chosen]


def _plant_answer(world: World, rng, entity: int, answer: str) -> None:
    """Replace one word of one passage-sized chunk with the answer token."""
    words = world.article_words[entity]
    n_chunks = (len(words) + 99) // 100
    while True:
        chunk = int(rng.integers(0, n_chunks))
        span = min(100, len(words) - chunk * 100)
        pos = chunk * 100 + int(rng.integers(0, span))
        if (entity, pos) not in world.used_slots:
            world.used_slots.add((entity, pos))
            words[pos] = answer
            return


def gen_questions(world: World, cfg: WorldConfig | None = None) -> list[QAItem]:
    """Build QA pairs and plant their answer tokens into the world's articles.

    Every answer is a fresh lowercase alphanumeric token (it survives
    normalization untouched) occurring in exactly one passage corpus-wide.
    """
    cfg = cfg or world.cfg
    rng = seeded_rng(cfg.seed, 11)
    items = []
    for q in range(cfg.n_questions):
        gold = int(rng.integers(0, cfg.n_entities))
        neigh = world.neighbors[gold]
        anchor: int | None = None
        if neigh and _chance(rng, cfg.p_link):
            anchor = neigh[int(rng.integers(0, len(neigh)))]
            keywords = _distinct_sigs(rng, anchor, cfg.question_keywords,
                                      cfg.sig_tokens_per_entity)
            keywords += _distinct_sigs(rng, gold, 1, cfg.sig_tokens_per_entity)
        else:
            keywords = _distinct_sigs(rng, gold, cfg.question_keywords + 1,
                                      cfg.sig_tokens_per_entity)
        answer = f"qanswer{q:04d}"
        _plant_answer(world, rng, gold, answer)
        target = answer.capitalize() if cfg.answer_style == "trivia" else answer
        items.append(QAItem(
            question_id=f"q{q:04d}",
            question="which fact links " + " ".join(keywords),
            answers=[target],
            gold_entity=gold,
            anchor_entity=anchor,
        ))
    return items


# -- writers (byte-stable) ---------------------------------------------------------


def write_world(world: World, questions: list[QAItem], out_dir: str | Path,
                splits: tuple[float, float] = (0.7, 0.15)) -> dict[str, str]:
    """Emit corpus/KG/alignment/QA files; same seed -> byte-identical output."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    corpus = out / "corpus.jsonl"
    with open(corpus, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(world.entity_ids)):
            rec = {"article_id": world.article_ids[i], "title": world.titles[i],
                   "text": " ".join(world.article_words[i])}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    paths["corpus"] = str(corpus)

    triples = out / "triples.tsv"
    with open(triples, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in world.triples:
            fh.write(f"{h}\t{r}\t{t}\n")
    paths["triples"] = str(triples)

    entities = out / "entities.tsv"
    with open(entities, "w", encoding="utf-8", newline="\n") as fh:
        for e in world.entity_ids:
            fh.write(e + "\n")
    paths["entities"] = str(entities)

    alignment = out / "alignment.tsv"
    with open(alignment, "w", encoding="utf-8", newline="\n") as fh:
        for a, e in zip(world.article_ids, world.entity_ids):
            fh.write(f"{a}\t{e}\n")
    paths["alignment"] = str(alignment)

    n = len(questions)
    n_train = int(n * splits[0])
    n_val = int(n * splits[1])
    parts = {
        "train": questions[:n_train],
        "val": questions[n_train : n_train + n_val],
        "test": questions[n_train + n_val :],
    }
    for split, items in parts.items():
        path = out / f"questions-{split}.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for item in items:
                fh.write(json.dumps(item.record(), sort_keys=True) + "\n")
        paths[f"questions_{split}"] = str(path)
    return paths


def generate(cfg: WorldConfig, out_dir: str | Path | None = None):
    """gen_world + gen_questions (+ optional write). Returns (world, questions)."""
    world = gen_world(cfg)
    questions = gen_questions(world, cfg)
    if out_dir is not None:
        write_world(world, questions, out_dir)
    return world, questions
