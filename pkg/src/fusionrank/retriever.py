"""Toy dual-encoder retrieval: exact top-k search plus graph reranking.

The two towers share an architecture (2-layer encoder, first-token pooling)
but not parameters. Corpus embeddings are computed offline into an
EmbeddingStore; retrieval is exhaustive exact dot-product search. The
reranker runs a GAT over the candidate passage graph seeded with the frozen
offline embeddings and rescores each candidate against the question vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flops
from .corpus import Passage, PassageGraph
from .gat import GatReranker, RerankerConfig, score_nodes
from .metrics import contains_answer, hits_at_k
from .optim import AdamW, warmup_linear_decay
from .params import ParameterSet, load_arrays, save_arrays, seeded_rng
from .tensor import Tensor, backward, cross_entropy, no_grad, select_position
from .text import CLS, PAD, Vocab
from .transformer import (
    TransformerConfig,
    embed_tokens,
    encoder_stack,
    register_embeddings,
    register_encoder_layer,
    register_layer_norm,
)
from .transformer import _ln  # shared layer-norm application


@dataclass
class DualEncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 104  # CLS + up to ~100 words of text

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(
            vocab_size=self.vocab_size, n_layers=self.n_layers,
            d_model=self.d_model, n_heads=self.n_heads, max_len=self.max_len,
        )


class DualEncoder:
    """Question/passage towers with first-token pooling; width D = d_model."""

    TOWERS = ("question", "passage")

    def __init__(self, cfg: DualEncoderConfig, seed: int):
        self.cfg = cfg
        self.tcfg = cfg.transformer()
        self.params = ParameterSet(seed)
        for tower in self.TOWERS:
            register_embeddings(self.params, tower, self.tcfg)
            for layer in range(cfg.n_layers):
                register_encoder_layer(self.params, f"{tower}.l{layer}", self.tcfg)
            register_layer_norm(self.params, f"{tower}.final_ln", cfg.d_model)

    def pack(self, texts: list[str], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
        t = self.cfg.max_len
        tokens = np.full((len(texts), t), PAD, dtype=np.intp)
        pad = np.zeros((len(texts), t), dtype=bool)
        for row, text in enumerate(texts):
            if not text.strip():
                raise ValueError("cannot encode empty text")
            ids = [CLS] + vocab.encode_text(text)[: t - 1]
            tokens[row, : len(ids)] = ids
            pad[row, : len(ids)] = True
        return tokens, pad

    def encode(self, tower: str, texts: list[str], vocab: Vocab) -> Tensor:
        """[B] texts -> pooled embeddings [B, D]."""
        tokens, pad = self.pack(texts, vocab)
        states = embed_tokens(self.params, tower, tokens)
        states = encoder_stack(self.params, tower, states, pad, self.tcfg)
        states = _ln(self.params, f"{tower}.final_ln", states)
        return select_position(states, 0)

    def save(self, path: str | Path) -> None:
        self.params.save(path)

    def load(self, path: str | Path) -> None:
        self.params.load(path)


@dataclass
class EmbeddingStore:
    """Offline passage-embedding matrix, one row per corpus passage."""

    matrix: np.ndarray  # [N, D] f64
    passage_ids: list[int]
    _row_of: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.passage_ids):
            raise ValueError("matrix rows must match passage_ids")
        self._row_of = {pid: i for i, pid in enumerate(self.passage_ids)}

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def row_for(self, passage_id: int) -> int:
        try:
            return self._row_of[passage_id]
        except KeyError:
            raise KeyError(f"no embedding row for passage {passage_id}") from None

    def rows(self, passage_ids: list[int]) -> np.ndarray:
        return self.matrix[[self.row_for(p) for p in passage_ids]]

    def save(self, path: str | Path) -> None:
        save_arrays(path, {"matrix": self.matrix},
                    extra={"N": self.n, "D": self.d, "dtype": "f64",
                           "passage_ids": list(map(int, self.passage_ids))})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        arrays, meta = load_arrays(path)
        return cls(arrays["matrix"], [int(p) for p in meta["passage_ids"]])


@dataclass
class RankedList:
    question_id: str
    passage_ids: list[int]
    scores: list[float]

    def __post_init__(self):
        if len(self.passage_ids) != len(self.scores):
            raise ValueError("ids and scores must align")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")
        if len(set(self.passage_ids)) != len(self.passage_ids):
            raise ValueError("duplicate passages in ranking")

    def top(self, k: int) -> list[int]:
        return self.passage_ids[:k]


def encode_corpus(passages: list[Passage], encoder: DualEncoder, vocab: Vocab,
                  batch_size: int = 64) -> EmbeddingStore:
    """Embed every passage with the passage tower, rows in passage_id order."""
    ordered = sorted(passages, key=lambda p: p.passage_id)
    rows = []
    with no_grad():
        for start in range(0, len(ordered), batch_size):
            chunk = ordered[start : start + batch_size]
            rows.append(encoder.encode("passage", [p.text for p in chunk], vocab).data)
    return EmbeddingStore(np.concatenate(rows, axis=0), [p.passage_id for p in ordered])


def encode_question(question: str, encoder: DualEncoder, vocab: Vocab) -> np.ndarray:
    with no_grad():
        return encoder.encode("question", [question], vocab).data[0]


def top_k_search(question_vec: np.ndarray, store: EmbeddingStore, k: int,
                 question_id: str = "") -> RankedList:
    """Exhaustive exact dot-product search; ties break by ascending row order."""
    if k > store.n:
        raise ValueError(f"requested top-{k} from a store of {store.n}")
    scores = store.matrix @ np.asarray(question_vec, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return RankedList(
        question_id,
        [store.passage_ids[i] for i in order],
        [float(scores[i]) for i in order],
    )


def retriever_rerank(question_vec: np.ndarray, candidates: RankedList,
                     store: EmbeddingStore, graph: PassageGraph,
                     reranker: GatReranker) -> RankedList:
    """Reorder the full candidate set by s_i = q . GAT(E)_i.

    Initial node features are the frozen offline embedding rows; ties keep
    the incoming (retriever) order.
    """
    feats = Tensor(store.rows(candidates.passage_ids))
    with flops.stage("reranker"):
        states = reranker.forward(feats, graph)
        scores = score_nodes(states, Tensor(np.asarray(question_vec))).data
    order = np.lexsort((np.arange(len(scores)), -scores))
    return RankedList(
        candidates.question_id,
        [candidates.passage_ids[i] for i in order],
        [float(scores[i]) for i in order],
    )


# -- training --------------------------------------------------------------------


@dataclass
class RetrieverTrainConfig:
    steps: int = 400
    batch_size: int = 8
    n_negatives: int = 7
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0


def gold_passage_flags(passages: list[Passage], answers: list[str]) -> list[bool]:
    return [contains_answer(p.text, answers) for p in passages]


def train_dual_encoder(passages: list[Passage], questions: list[dict], vocab: Vocab,
                       encoder: DualEncoder, cfg: RetrieverTrainConfig) -> list[float]:
    """Fit both towers with a sampled-negative listwise loss.

    ``questions`` records need "question" and "answers"; questions whose
    answers appear in no passage are skipped. Returns the per-step losses.
    """
    gold_rows: list[tuple[str, list[int]]] = []
    for q in questions:
        golds = [i for i, p in enumerate(passages) if contains_answer(p.text, q["answers"])]
        if golds:
            gold_rows.append((q["question"], golds))
    if not gold_rows:
        raise ValueError("no trainable questions: no answers found in the corpus")

    rng = seeded_rng(cfg.seed, 1)
    opt = AdamW(encoder.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(cfg.steps):
        picks = rng.integers(0, len(gold_rows), size=cfg.batch_size)
        batch_loss = None
        for qi in picks:
            question, golds = gold_rows[qi]
            gold = golds[rng.integers(0, len(golds))]
            negatives = []
            while len(negatives) < cfg.n_negatives:
                cand = int(rng.integers(0, len(passages)))
                if cand not in golds and cand not in negatives:
                    negatives.append(cand)
            cand_rows = [gold] + negatives
            q_emb = encoder.encode("question", [question], vocab)  # [1, D]
            p_emb = encoder.encode("passage", [passages[i].text for i in cand_rows], vocab)
            scores = score_nodes(p_emb, q_emb.reshape(-1))
            target = np.zeros(len(cand_rows))
            target[0] = 1.0
            loss = cross_entropy(scores, Tensor(target))
            batch_loss = loss if batch_loss is None else batch_loss + loss
        batch_loss = batch_loss * (1.0 / cfg.batch_size)
        backward(batch_loss)
        opt.step(lr_scale=warmup_linear_decay(step, cfg.steps, 0))
        opt.zero_grad()
        losses.append(batch_loss.item())
    return losses


@dataclass
class RerankTrainItem:
    """One question's frozen inputs for reranker training or evaluation."""

    question_id: str
    question_vec: np.ndarray
    candidate_rows: np.ndarray  # store row indices, retriever order
    gold_positions: list[int]   # indices into the candidate list
    graph: PassageGraph


@dataclass
class RerankTrainConfig:
    gnn_layers: int = 3
    gnn_heads: int = 2
    use_graph: bool = True
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_every: int = 50
    eval_k: int = 10
    seed: int = 0


def _rerank_scores(reranker: GatReranker, store: EmbeddingStore,
                   item: RerankTrainItem) -> Tensor:
    feats = Tensor(store.matrix[item.candidate_rows])
    states = reranker.forward(feats, item.graph)
    return score_nodes(states, Tensor(item.question_vec))


def rerank_hits(reranker: GatReranker, store: EmbeddingStore,
                items: list[RerankTrainItem], k: int) -> float:
    flag_lists = []
    with no_grad():
        for item in items:
            scores = _rerank_scores(reranker, store, item).data
            order = np.lexsort((np.arange(len(scores)), -scores))
            golds = set(item.gold_positions)
            flag_lists.append([int(i) in golds for i in order])
    return hits_at_k(flag_lists, k)


def train_retriever_reranker(train_items: list[RerankTrainItem],
                             val_items: list[RerankTrainItem],
                             store: EmbeddingStore,
                             cfg: RerankTrainConfig) -> tuple[GatReranker, dict]:
    """Listwise softmax training of the GAT reranker over frozen embeddings.

    Keeps the checkpoint with the best validation Hits@k. Questions without
    a gold candidate are skipped up front.
    """
    trainable = [it for it in train_items if it.gold_positions]
    if not trainable:
        raise ValueError("no training questions with a gold candidate")
    reranker = GatReranker(
        RerankerConfig(width=store.d, n_layers=cfg.gnn_layers,
                       n_heads=cfg.gnn_heads, use_graph=cfg.use_graph),
        seed=cfg.seed,
    )
    rng = seeded_rng(cfg.seed, 2)
    opt = AdamW(reranker.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = {"hits": -1.0, "step": 0, "state": reranker.params.state_arrays()}
    history = []
    for step in range(cfg.steps):
        picks = rng.integers(0, len(trainable), size=cfg.batch_size)
        batch_loss = None
        for qi in picks:
            item = trainable[qi]
            scores = _rerank_scores(reranker, store, item)
            target = np.zeros(len(item.candidate_rows))
            target[item.gold_positions] = 1.0 / len(item.gold_positions)
            loss = cross_entropy(scores, Tensor(target))
            batch_loss = loss if batch_loss is None else batch_loss + loss
        batch_loss = batch_loss * (1.0 / cfg.batch_size)
        backward(batch_loss)
        opt.step(lr_scale=warmup_linear_decay(step, cfg.steps, 0))
        opt.zero_grad()
        entry = {"step": step, "loss": batch_loss.item()}
        if val_items and ((step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1):
            hits = rerank_hits(reranker, store, val_items, cfg.eval_k)
            entry["val_hits"] = hits
            if hits > best["hits"]:
                best = {"hits": hits, "step": step, "state": reranker.params.state_arrays()}
        history.append(entry)
    if best["hits"] >= 0.0:
        reranker.params.load_arrays(best["state"])
    return reranker, {"history": history, "best_step": best["step"], "best_hits": best["hits"]}


def ranked_list_to_json(ranked: RankedList) -> dict:
    return {
        "question_id": ranked.question_id,
        "ranking": [[int(p), float(s)] for p, s in zip(ranked.passage_ids, ranked.scores)],
    }


def ranked_list_from_json(rec: dict) -> RankedList:
    return RankedList(
        rec["question_id"],
        [int(p) for p, _ in rec["ranking"]],
        [float(s) for _, s in rec["ranking"]],
    )
