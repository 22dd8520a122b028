import hashlib
from pathlib import Path

import numpy as np
import pytest

from fusionrank.corpus import build_passages, load_alignment, load_corpus, load_kg
from fusionrank.datagen import QAItem, WorldConfig, gen_questions, gen_world, generate, write_world
from fusionrank.metrics import contains_answer, normalize_answer


def tree_hash(root: Path) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.iterdir()) if p.is_file()
    }


def small_cfg(**overrides) -> WorldConfig:
    defaults = dict(seed=3, n_entities=20, avg_triples_per_entity=3.0,
                    words_per_article=150, n_questions=30, n_filler_tokens=50,
                    p_link=0.8)
    defaults.update(overrides)
    return WorldConfig(**defaults)


def test_same_seed_byte_identical_files(tmp_path):
    generate(small_cfg(), tmp_path / "a")
    generate(small_cfg(), tmp_path / "b")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate(small_cfg(), tmp_path / "a")
    generate(small_cfg(seed=4), tmp_path / "b")
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "b")


def test_zero_degree_gives_empty_kg():
    world = gen_world(small_cfg(avg_triples_per_entity=0.0))
    assert world.triples == []
    assert all(not n for n in world.neighbors)


def test_triple_count_concentrates_around_expectation():
    # 100 entities at average degree 4 -> ~200 undirected triples
    counts = []
    for seed in range(20):
        cfg = WorldConfig(seed=seed, n_entities=100, avg_triples_per_entity=4.0,
                          words_per_article=100, n_questions=1)
        counts.append(len(gen_world(cfg).triples))
    mean = np.mean(counts)
    assert 200 * 0.7 <= mean <= 200 * 1.3


def test_every_question_has_exactly_one_gold_passage():
    world, questions = generate(small_cfg())
    passages = build_passages(
        (world.article_ids[i], world.titles[i], " ".join(world.article_words[i]))
        for i in range(len(world.article_ids))
    )
    for q in questions:
        golds = [p for p in passages if contains_answer(p.text, q.answers)]
        assert len(golds) == 1
        assert golds[0].article_id == world.article_ids[q.gold_entity]


def test_answers_survive_normalization():
    _, questions = generate(small_cfg())
    for q in questions:
        assert normalize_answer(q.answers[0]) == q.answers[0].lower()
        assert normalize_answer(q.answers[0]) != ""


def test_trivia_style_capitalizes_target():
    _, questions = generate(small_cfg(answer_style="trivia"))
    assert all(q.answers[0][0].isupper() for q in questions)
    assert all(normalize_answer(q.answers[0]) == q.answers[0].lower() for q in questions)


def test_p_link_zero_never_uses_anchor():
    _, questions = generate(small_cfg(p_link=0.0))
    assert all(q.anchor_entity is None for q in questions)


def test_p_link_one_uses_anchor_when_neighbors_exist():
    world, questions = generate(small_cfg(p_link=1.0, avg_triples_per_entity=6.0))
    with_neighbors = [q for q in questions if world.neighbors[q.gold_entity]]
    assert with_neighbors, "expected some connected gold entities"
    assert all(q.anchor_entity is not None for q in with_neighbors)
    for q in with_neighbors:
        assert q.anchor_entity in world.neighbors[q.gold_entity]


def test_anchor_keywords_in_anchor_article_not_answer():
    world, questions = generate(small_cfg(p_link=1.0, avg_triples_per_entity=6.0))
    for q in questions:
        if q.anchor_entity is None:
            continue
        anchor_text = " ".join(world.article_words[q.anchor_entity])
        keywords = [t for t in q.question.split() if t.startswith("e")]
        anchor_kw = [k for k in keywords if k.startswith(f"e{q.anchor_entity:04d}")]
        assert anchor_kw, "anchor keywords missing from question"
        assert all(k in anchor_text for k in anchor_kw)
        assert q.answers[0].lower() not in anchor_text


def test_written_files_load_through_corpus_module(tmp_path):
    world, questions = generate(small_cfg(), tmp_path)
    articles = load_corpus(tmp_path / "corpus.jsonl")
    assert len(articles) == 20
    kg = load_kg(tmp_path / "triples.tsv", tmp_path / "entities.tsv")
    assert kg.stats()["n_entities"] == 20
    align = load_alignment(tmp_path / "alignment.tsv", kg)
    assert len(align) == 20


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(p_link=1.5)
    with pytest.raises(ValueError):
        WorldConfig(n_entities=0)
    with pytest.raises(ValueError):
        WorldConfig(answer_style="verse")


def test_splits_cover_all_questions(tmp_path):
    world, questions = generate(small_cfg(n_questions=20), tmp_path)
    lines = 0
    for split in ("train", "val", "test"):
        lines += len((tmp_path / f"questions-{split}.jsonl").read_text().strip().split("\n"))
    assert lines == 20
