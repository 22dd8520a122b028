"""Stage orchestration over an append-only run directory.

Each stage reads earlier artifacts, writes its own, and records a manifest
(config hash, input hashes, seed, outputs, metrics). Artifact-producing
stages refuse to overwrite existing outputs unless forced; the reporting
stages (evaluate, cost-report) are idempotent and may rewrite their
reports with identical content.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .config import RunConfig
from .corpus import PassageGraph, build_passage_graph, build_passages, graph_stats, load_alignment, load_corpus, load_kg
from .costmodel import cost_table, measure_run, render_cost_table
from .datagen import generate
from .gat import GatReranker, RerankerConfig
from .metrics import build_eval_result, contains_answer, exact_match, hits_csv
from .reader import (
    ReaderConfig,
    ReaderExample,
    ReaderModel,
    ReaderTrainConfig,
    forward_reader,
    load_reader_dataset,
    train_reader,
    write_reader_dataset,
)
from .retriever import (
    DualEncoder,
    DualEncoderConfig,
    EmbeddingStore,
    RankedList,
    RerankTrainConfig,
    RerankTrainItem,
    RetrieverTrainConfig,
    encode_corpus,
    ranked_list_from_json,
    ranked_list_to_json,
    retriever_rerank,
    top_k_search,
    train_dual_encoder,
    train_retriever_reranker,
)
from .tensor import no_grad
from .text import Vocab

SPLITS = ("train", "val", "test")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(out: Path, *names: str) -> list[Path]:
    paths = [out / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing inputs (run earlier stages first): {missing}")
    return paths


def _guard_outputs(out: Path, names: list[str], force: bool) -> None:
    existing = [str(out / n) for n in names if (out / n).exists()]
    if existing and not force:
        raise FileExistsError(
            f"outputs already exist (run dirs are append-only, use --force to redo): {existing}"
        )


def write_manifest(out: Path, stage: str, cfg: RunConfig, inputs: list[Path],
                   outputs: list[Path], metrics: dict, seconds: float) -> dict:
    manifest = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "inputs": {p.name: _sha256(p) for p in inputs if p.exists()},
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "metrics": metrics,
        "seconds": round(seconds, 3),
    }
    (out / f"{stage}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_questions(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


class Workspace:
    """Lazy accessors for the shared artifacts inside one run directory."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self._cache: dict[str, object] = {}

    def _memo(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def articles(self):
        return self._memo("articles", lambda: load_corpus(self.out / "corpus.jsonl"))

    @property
    def passages(self):
        return self._memo("passages", lambda: build_passages(self.articles))

    @property
    def passage_by_id(self):
        return self._memo("passage_by_id", lambda: {p.passage_id: p for p in self.passages})

    @property
    def kg(self):
        return self._memo("kg", lambda: load_kg(self.out / "triples.tsv",
                                                self.out / "entities.tsv"))

    @property
    def alignment(self):
        return self._memo("alignment", lambda: load_alignment(self.out / "alignment.tsv", self.kg))

    @property
    def vocab(self) -> Vocab:
        return self._memo("vocab", lambda: Vocab.load(self.out / "vocab.json"))

    def questions(self, split: str) -> list[dict]:
        return self._memo(f"questions_{split}",
                          lambda: _load_questions(self.out / f"questions-{split}.jsonl"))

    @property
    def encoder(self) -> DualEncoder:
        def build():
            enc = DualEncoder(self._encoder_cfg(), seed=self.cfg.seed + 1)
            enc.load(self.out / "retriever-encoder.bin")
            return enc
        return self._memo("encoder", build)

    def _encoder_cfg(self) -> DualEncoderConfig:
        r = self.cfg.retriever
        return DualEncoderConfig(vocab_size=len(self.vocab), d_model=r.d_model,
                                 n_layers=r.n_layers, n_heads=r.n_heads,
                                 max_len=r.max_text_len)

    @property
    def store(self) -> EmbeddingStore:
        return self._memo("store", lambda: EmbeddingStore.load(self.out / "embedding-store.bin"))

    def reader_model(self) -> ReaderModel:
        r = self.cfg.reader
        cfg = ReaderConfig(
            vocab_size=len(self.vocab), n_layers=r.n_layers, d_model=r.d_model,
            n_heads=r.n_heads, ffn_mult=r.ffn_mult, passage_len=r.passage_len,
            answer_len=r.answer_len, rerank_layer=r.rerank_layer, n_input=r.n_input,
            n_decode=r.n_decode, rerank_loss_weight=r.rerank_loss_weight,
            gnn_layers=r.gnn_layers, gnn_heads=r.gnn_heads, use_graph=r.use_graph,
            answer_target=r.answer_target,
        )
        return ReaderModel(cfg, self.vocab, seed=self.cfg.seed + 2)


# -- stages --------------------------------------------------------------------------


def stage_datagen(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    _guard_outputs(out, ["corpus.jsonl", "triples.tsv", "alignment.tsv"], force)
    world, questions = generate(cfg.world, out)
    metrics = {
        "n_articles": len(world.article_ids),
        "n_triples": len(world.triples),
        "n_questions": len(questions),
    }
    outputs = [out / n for n in
               ["corpus.jsonl", "triples.tsv", "entities.tsv", "alignment.tsv"]
               + [f"questions-{s}.jsonl" for s in SPLITS]]
    return write_manifest(out, "datagen", cfg, [], outputs, metrics, time.perf_counter() - t0)


def stage_ingest(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    t0 = time.perf_counter()
    inputs = _require(out, "corpus.jsonl", "triples.tsv", "alignment.tsv", "questions-train.jsonl")
    _guard_outputs(out, ["vocab.json", "ingest-stats.json"], force)
    ws = Workspace(cfg, out)
    passages = ws.passages
    for p in passages:  # alignment must cover every article
        if ws.alignment.entity_for(p.article_id) is None:
            raise ValueError(f"article {p.article_id} has no alignment entry")
    texts = [p.text for p in passages] + [q["question"] for q in ws.questions("train")]
    vocab = Vocab.build(texts)
    vocab.save(out / "vocab.json")
    stats = {
        "n_articles": len(ws.articles),
        "n_passages": len(passages),
        "vocab_size": len(vocab),
        "kg": ws.kg.stats(),
    }
    (out / "ingest-stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return write_manifest(out, "ingest", cfg, inputs,
                          [out / "vocab.json", out / "ingest-stats.json"],
                          stats, time.perf_counter() - t0)


def stage_train_retriever(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    t0 = time.perf_counter()
    inputs = _require(out, "corpus.jsonl", "vocab.json", "questions-train.jsonl")
    _guard_outputs(out, ["retriever-encoder.bin", "embedding-store.bin"], force)
    ws = Workspace(cfg, out)
    r = cfg.retriever
    encoder = DualEncoder(ws._encoder_cfg(), seed=cfg.seed + 1)
    losses = train_dual_encoder(
        ws.passages, ws.questions("train"), ws.vocab, encoder,
        RetrieverTrainConfig(steps=r.train_steps, batch_size=r.batch_size,
                             n_negatives=r.n_negatives, lr=r.lr,
                             weight_decay=r.weight_decay, seed=cfg.seed),
    )
    encoder.save(out / "retriever-encoder.bin")
    store = encode_corpus(ws.passages, encoder, ws.vocab)
    store.save(out / "embedding-store.bin")
    metrics = {"train_steps": len(losses),
               "first_loss": losses[0] if losses else None,
               "last_loss": losses[-1] if losses else None}
    return write_manifest(out, "train-retriever", cfg, inputs,
                          [out / "retriever-encoder.bin", out / "embedding-store.bin"],
                          metrics, time.perf_counter() - t0)


def _question_vec(ws: Workspace, question: str) -> np.ndarray:
    with no_grad():
        return ws.encoder.encode("question", [question], ws.vocab).data[0]


def _retrieval_items(ws: Workspace, split: str) -> list[dict]:
    """Per-question retrieval context: vector, candidates, golds, graph."""
    cfg = ws.cfg
    n0 = min(cfg.retriever.n_candidates, ws.store.n)
    items = []
    for q in ws.questions(split):
        qvec = _question_vec(ws, q["question"])
        ranked = top_k_search(qvec, ws.store, n0, question_id=q["question_id"])
        cand_passages = [ws.passage_by_id[p] for p in ranked.passage_ids]
        graph = build_passage_graph(cand_passages, ws.kg, ws.alignment)
        golds = [i for i, p in enumerate(cand_passages)
                 if contains_answer(p.text, q["answers"])]
        items.append({
            "question": q, "qvec": qvec, "ranked": ranked,
            "graph": graph, "gold_positions": golds,
        })
    return items


def _rerank_train_items(ws: Workspace, items: list[dict]) -> list[RerankTrainItem]:
    return [
        RerankTrainItem(
            question_id=it["question"]["question_id"],
            question_vec=it["qvec"],
            candidate_rows=np.array([ws.store.row_for(p) for p in it["ranked"].passage_ids]),
            gold_positions=it["gold_positions"],
            graph=it["graph"],
        )
        for it in items
    ]


def _gold_flag_lists(items: list[dict], rankings: dict[str, RankedList],
                     answer_of: dict[str, list[str]], passage_by_id) -> list[list[bool]]:
    flags = []
    for it in items:
        qid = it["question"]["question_id"]
        ranked = rankings[qid]
        answers = answer_of[qid]
        flags.append([contains_answer(passage_by_id[p].text, answers)
                      for p in ranked.passage_ids])
    return flags


def stage_rerank(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Train the retriever-side reranker, rerank every split, emit reader data."""
    t0 = time.perf_counter()
    inputs = _require(out, "embedding-store.bin", "retriever-encoder.bin",
                      "triples.tsv", "alignment.tsv", "vocab.json")
    outputs = (["reranker.bin", "rerank-metrics.json", "graph-stats.json", "hits.csv"]
               + [f"rankings-{s}.jsonl" for s in SPLITS]
               + [f"reranked-{s}.jsonl" for s in SPLITS]
               + [f"reader-{s}.jsonl" for s in SPLITS])
    _guard_outputs(out, outputs, force)
    ws = Workspace(cfg, out)
    rk = cfg.rerank

    split_items = {s: _retrieval_items(ws, s) for s in SPLITS}
    reranker, info = train_retriever_reranker(
        _rerank_train_items(ws, split_items["train"]),
        _rerank_train_items(ws, split_items["val"]),
        ws.store,
        RerankTrainConfig(gnn_layers=rk.gnn_layers, gnn_heads=rk.gnn_heads,
                          use_graph=rk.use_graph, steps=rk.train_steps,
                          batch_size=rk.batch_size, lr=rk.lr,
                          weight_decay=rk.weight_decay, eval_every=rk.eval_every,
                          eval_k=rk.eval_k, seed=cfg.seed),
    )
    reranker.params.save(out / "reranker.bin")

    metrics: dict = {"train": {"best_step": info["best_step"], "best_hits": info["best_hits"]}}
    hits_rows: dict[str, dict[int, float]] = {}
    for split in SPLITS:
        items = split_items[split]
        answer_of = {it["question"]["question_id"]: it["question"]["answers"] for it in items}
        base: dict[str, RankedList] = {}
        rer: dict[str, RankedList] = {}
        with open(out / f"rankings-{split}.jsonl", "w", encoding="utf-8") as fh_base, \
             open(out / f"reranked-{split}.jsonl", "w", encoding="utf-8") as fh_rer:
            for it in items:
                qid = it["question"]["question_id"]
                base[qid] = it["ranked"]
                rer[qid] = retriever_rerank(it["qvec"], it["ranked"], ws.store,
                                            it["graph"], reranker)
                fh_base.write(json.dumps(ranked_list_to_json(base[qid])) + "\n")
                fh_rer.write(json.dumps(ranked_list_to_json(rer[qid])) + "\n")
        base_flags = _gold_flag_lists(items, base, answer_of, ws.passage_by_id)
        rer_flags = _gold_flag_lists(items, rer, answer_of, ws.passage_by_id)
        ks = cfg.eval.hits_ks
        base_res = build_eval_result(None, base_flags, ks)
        rer_res = build_eval_result(None, rer_flags, ks)
        metrics[split] = {"unreranked": base_res.to_dict()["hits_at_k"],
                          "reranked": rer_res.to_dict()["hits_at_k"]}
        if split == "test":
            hits_rows["retriever"] = base_res.hits
            hits_rows["reranked"] = rer_res.hits

        # reader dataset: top-N1 of the reranked list, graph restricted to it
        examples = []
        for it in items:
            qid = it["question"]["question_id"]
            top = rer[qid].passage_ids[: cfg.reader.n_input]
            cand = [ws.passage_by_id[p] for p in top]
            graph = build_passage_graph(cand, ws.kg, ws.alignment)
            examples.append(ReaderExample(
                question_id=qid,
                question=it["question"]["question"],
                answers=it["question"]["answers"],
                passage_ids=top,
                passage_texts=[p.text for p in cand],
                gold_flags=[contains_answer(p.text, it["question"]["answers"]) for p in cand],
                graph=graph,
            ))
        write_reader_dataset(out / f"reader-{split}.jsonl", examples)

    (out / "hits.csv").write_text(hits_csv(hits_rows, cfg.eval.hits_ks))
    stats = graph_stats([it["graph"] for it in split_items["train"]])
    (out / "graph-stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    (out / "rerank-metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return write_manifest(out, "rerank", cfg, inputs, [out / n for n in outputs],
                          metrics, time.perf_counter() - t0)


def stage_train_reader(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    t0 = time.perf_counter()
    inputs = _require(out, "vocab.json", "reader-train.jsonl", "reader-val.jsonl")
    _guard_outputs(out, ["reader-model.bin", "reader-config.json", "reader-history.json"], force)
    ws = Workspace(cfg, out)
    text_of = {p.passage_id: p.text for p in ws.passages}
    article_of = {p.passage_id: p.article_id for p in ws.passages}
    train_ex = load_reader_dataset(out / "reader-train.jsonl", text_of, article_of)
    val_ex = load_reader_dataset(out / "reader-val.jsonl", text_of, article_of)
    model = ws.reader_model()
    r = cfg.reader
    info = train_reader(model, train_ex, val_ex,
                        ReaderTrainConfig(steps=r.train_steps, batch_size=r.batch_size,
                                          lr=r.lr, weight_decay=r.weight_decay,
                                          warmup_frac=r.warmup_frac,
                                          eval_every=r.eval_every, seed=cfg.seed))
    model.params.save(out / "reader-model.bin")
    (out / "reader-config.json").write_text(json.dumps(asdict(model.cfg), indent=2, sort_keys=True))
    (out / "reader-history.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    metrics = {"best_step": info["best_step"], "best_val": info["best_val"],
               "first_loss": info["history"][0]["loss"] if info["history"] else None,
               "last_loss": info["history"][-1]["loss"] if info["history"] else None}
    return write_manifest(out, "train-reader", cfg, inputs,
                          [out / "reader-model.bin", out / "reader-config.json",
                           out / "reader-history.json"],
                          metrics, time.perf_counter() - t0)


def stage_evaluate(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Answer the test split with the trained reader; idempotent."""
    t0 = time.perf_counter()
    inputs = _require(out, "vocab.json", "reader-model.bin", "reader-test.jsonl")
    ws = Workspace(cfg, out)
    text_of = {p.passage_id: p.text for p in ws.passages}
    article_of = {p.passage_id: p.article_id for p in ws.passages}
    examples = load_reader_dataset(out / "reader-test.jsonl", text_of, article_of)
    model = ws.reader_model()
    model.params.load(out / "reader-model.bin")
    em_flags = []
    gold_hits = []
    predictions = []
    with no_grad():
        for ex in examples:
            res = forward_reader(model, ex)
            answer = model.decode_text(res.batch_full)
            em_flags.append(exact_match(answer, ex.answers))
            gold_hits.append(res.gold_in_selection)
            predictions.append({"question_id": ex.question_id, "prediction": answer,
                                "em": em_flags[-1], "gold_in_selection": bool(res.gold_in_selection)})
    result = build_eval_result(em_flags, None, cfg.eval.hits_ks)
    metrics = {"em": result.em, "n_questions": result.n_questions,
               "gold_in_selection_rate": float(np.mean(gold_hits)) if gold_hits else 0.0}
    (out / "eval-metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    (out / "predictions.jsonl").write_text(
        "\n".join(json.dumps(p) for p in predictions) + ("\n" if predictions else ""))
    return write_manifest(out, "evaluate", cfg, inputs,
                          [out / "eval-metrics.json", out / "predictions.jsonl"],
                          metrics, time.perf_counter() - t0)


def stage_cost_report(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Analytic cost table plus one instrumented toy run; idempotent."""
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.cost
    rows = cost_table(c.n_layers, c.n_input, c.n_decode, c.rerank_layers)

    # measured reconciliation on a self-contained seeded toy model
    vocab = Vocab.build([" ".join(f"tok{i}" for i in range(64))])
    r = cfg.reader
    model = ReaderModel(
        ReaderConfig(vocab_size=len(vocab), n_layers=r.n_layers, d_model=r.d_model,
                     n_heads=r.n_heads, ffn_mult=r.ffn_mult, passage_len=r.passage_len,
                     answer_len=r.answer_len, rerank_layer=r.rerank_layer,
                     n_input=r.n_input, n_decode=r.n_decode,
                     gnn_layers=r.gnn_layers, gnn_heads=r.gnn_heads),
        vocab, seed=cfg.seed + 2,
    )
    rng = np.random.default_rng(cfg.seed)
    texts = [" ".join(f"tok{j}" for j in rng.integers(0, 64, size=r.passage_len))
             for _ in range(r.n_input)]
    edges = sorted({tuple(sorted(map(int, rng.integers(0, r.n_input, size=2))))
                    for _ in range(r.n_input)} - {(i, i) for i in range(r.n_input)})
    example = ReaderExample(
        question_id="cost", question="tok0 tok1 tok2", answers=["tok3"],
        passage_ids=list(range(r.n_input)), passage_texts=texts,
        gold_flags=[False] * r.n_input,
        graph=PassageGraph(list(range(r.n_input)), [(int(i), int(j)) for i, j in edges]),
    )
    report = measure_run(model, example)
    report.save(out / "cost-report.json")
    (out / "cost-table.txt").write_text(render_cost_table(rows) + "\n")
    metrics = {
        "table": rows,
        "measured_saving_ratio": report.measured_saving_ratio,
        "analytic_saving_ratio": report.analytic_saving_ratio,
    }
    return write_manifest(out, "cost-report", cfg, [],
                          [out / "cost-report.json", out / "cost-table.txt"],
                          metrics, time.perf_counter() - t0)


PIPELINE_STAGES = ("datagen", "ingest", "train-retriever", "rerank", "train-reader", "evaluate")

STAGE_FNS = {
    "datagen": stage_datagen,
    "ingest": stage_ingest,
    "train-retriever": stage_train_retriever,
    "rerank": stage_rerank,
    "train-reader": stage_train_reader,
    "evaluate": stage_evaluate,
    "cost-report": stage_cost_report,
}


def run_all(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    results = {}
    for stage in PIPELINE_STAGES:
        results[stage] = STAGE_FNS[stage](cfg, out, force)
    return results
