"""Fusion reader with staged encoding, graph reranking, and early exit.

Every candidate passage (prefixed with the question) runs through encoder
layers 1..L1. The first-position token state of each passage seeds a GAT
over the passage graph; the resulting scores pick the top-N2 passages,
which alone continue through layers L1+1..L and into the decoder, whose
cross-attention spans their concatenated token states. Answer generation
and reranking train jointly: loss = answer_ce + weight * rank_ce.

Selected passages are restored to retriever order before stage 2 so that
the degenerate configuration (keep everything) reproduces the single-pass
encoder bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flops
from .corpus import PassageGraph
from .gat import GatReranker, RerankerConfig, score_nodes
from .optim import AdamW, warmup_linear_decay
from .params import ParameterSet, seeded_rng
from .tensor import (
    Tensor,
    backward,
    cross_entropy,
    matmul,
    no_grad,
    select_position,
    take_rows,
    token_cross_entropy,
)
from .text import BOS, CLS, EOS, PAD, SEP, Vocab
from .transformer import (
    TransformerConfig,
    _ln,
    concat_encoded,
    decoder_stack,
    embed_tokens,
    encoder_stack,
    register_decoder_layer,
    register_embeddings,
    register_encoder_layer,
    register_layer_norm,
)


@dataclass
class ReaderConfig:
    vocab_size: int
    n_layers: int = 4          # encoder and decoder depth
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    passage_len: int = 48      # tokens per question+passage sequence
    answer_len: int = 8        # max generated answer tokens
    rerank_layer: int = 2      # encoder layer whose states feed the reranker
    n_input: int = 20          # candidate passages entering the encoder
    n_decode: int = 4          # passages kept for the decoder
    rerank_loss_weight: float = 0.1
    gnn_layers: int = 3
    gnn_heads: int = 2
    use_graph: bool = True
    answer_target: str = "first"  # or "sample": draw the target among answers

    def __post_init__(self):
        if not (1 <= self.rerank_layer <= self.n_layers):
            raise ValueError("rerank layer must lie in [1, n_layers]")
        if self.n_decode > self.n_input:
            raise ValueError("cannot decode more passages than were encoded")
        if self.answer_target not in ("first", "sample"):
            raise ValueError("answer_target must be 'first' or 'sample'")

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(
            vocab_size=self.vocab_size, n_layers=self.n_layers, d_model=self.d_model,
            n_heads=self.n_heads, ffn_mult=self.ffn_mult,
            max_len=max(self.passage_len, self.answer_len + 1),
        )


@dataclass
class EncodedBatch:
    """Per-passage token states, all at the same encoder layer."""

    states: Tensor            # [n, T_p, H]
    pad_mask: np.ndarray      # [n, T_p] bool, True at real tokens
    layer: int
    positions: np.ndarray     # indices into the original candidate list
    cls_position: int = 0


@dataclass
class ReaderExample:
    question_id: str
    question: str
    answers: list[str]
    passage_ids: list[int]
    passage_texts: list[str]
    gold_flags: list[bool]
    graph: PassageGraph | None = None


class ReaderModel:
    def __init__(self, cfg: ReaderConfig, vocab: Vocab, seed: int):
        if cfg.vocab_size != len(vocab):
            raise ValueError("config vocab_size must match the vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.tcfg = cfg.transformer()
        ps = ParameterSet(seed)
        register_embeddings(ps, "reader", self.tcfg)
        for layer in range(cfg.n_layers):
            register_encoder_layer(ps, f"enc.l{layer}", self.tcfg)
            register_decoder_layer(ps, f"dec.l{layer}", self.tcfg)
        register_layer_norm(ps, "enc.final_ln", cfg.d_model)
        register_layer_norm(ps, "dec.final_ln", cfg.d_model)
        ps.add("out_proj", (cfg.d_model, cfg.vocab_size))
        ps.add("rerank_w", (cfg.d_model,), fan_in=cfg.d_model)
        self.params = ps
        self.reranker = GatReranker(
            RerankerConfig(width=cfg.d_model, n_layers=cfg.gnn_layers,
                           n_heads=cfg.gnn_heads, use_graph=cfg.use_graph),
            seed=seed, params=ps, prefix="rerank.gat",
        )

    # -- input packing ----------------------------------------------------------

    def pack_inputs(self, question: str, passage_texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """[CLS] question [SEP] passage, truncated and padded to passage_len."""
        t = self.cfg.passage_len
        q_ids = self.vocab.encode_text(question)[: (t - 2) // 2]
        budget = t - 2 - len(q_ids)
        tokens = np.full((len(passage_texts), t), PAD, dtype=np.intp)
        pad = np.zeros((len(passage_texts), t), dtype=bool)
        for row, text in enumerate(passage_texts):
            ids = [CLS] + q_ids + [SEP] + self.vocab.encode_text(text)[:budget]
            tokens[row, : len(ids)] = ids
            pad[row, : len(ids)] = True
        return tokens, pad

    def answer_token_ids(self, answer: str) -> tuple[np.ndarray, np.ndarray]:
        """(decoder input, target) pair for teacher forcing."""
        ids = self.vocab.encode_text(answer)
        target = (ids + [EOS])[: self.cfg.answer_len]
        dec_in = [BOS] + target[:-1]
        return np.asarray(dec_in, dtype=np.intp), np.asarray(target, dtype=np.intp)

    # -- staged encoding ----------------------------------------------------------

    def encode_stage1(self, question: str, passage_texts: list[str]) -> EncodedBatch:
        """All candidates through encoder layers 1..rerank_layer, independently."""
        tokens, pad = self.pack_inputs(question, passage_texts)
        with flops.stage("encoder_stage1"):
            states = embed_tokens(self.params, "reader", tokens)
            states = encoder_stack(self.params, "enc", states, pad, self.tcfg,
                                   lo=0, hi=self.cfg.rerank_layer)
        return EncodedBatch(states, pad, self.cfg.rerank_layer,
                            np.arange(len(passage_texts)))

    def encode_stage2(self, batch: EncodedBatch, selected: np.ndarray) -> EncodedBatch:
        """Only the selected passages continue through the remaining layers."""
        selected = np.asarray(selected, dtype=np.intp)
        if selected.size == 0:
            raise ValueError("must keep at least one passage")
        if selected.max(initial=0) >= batch.states.shape[0] or selected.min(initial=0) < 0:
            raise IndexError("selected passage index out of range")
        states = take_rows(batch.states, selected)
        pad = batch.pad_mask[selected]
        with flops.stage("encoder_stage2"):
            states = encoder_stack(self.params, "enc", states, pad, self.tcfg,
                                   lo=batch.layer, hi=self.cfg.n_layers)
        return EncodedBatch(states, pad, self.cfg.n_layers, batch.positions[selected])

    def encode_monolithic(self, question: str, passage_texts: list[str]) -> EncodedBatch:
        """Reference single-pass encoding through all layers (vanilla path)."""
        tokens, pad = self.pack_inputs(question, passage_texts)
        with flops.stage("encoder_stage1"):
            states = embed_tokens(self.params, "reader", tokens)
            states = encoder_stack(self.params, "enc", states, pad, self.tcfg)
        return EncodedBatch(states, pad, self.cfg.n_layers, np.arange(len(passage_texts)))

    # -- reranking -----------------------------------------------------------------

    def extract_cls(self, batch: EncodedBatch) -> Tensor:
        return select_position(batch.states, batch.cls_position)

    def rerank_scores(self, batch: EncodedBatch, graph: PassageGraph | None) -> Tensor:
        """s_i = w . GAT(cls states)_i over the passage graph."""
        cls = self.extract_cls(batch)
        with flops.stage("reranker"):
            states = self.reranker.forward(cls, graph)
            return score_nodes(states, self.params["rerank_w"])

    def select_top(self, scores: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k best scores, descending; ties keep prior rank order."""
        scores = np.asarray(scores, dtype=np.float64)
        if k > len(scores):
            raise ValueError(f"cannot select top-{k} of {len(scores)} scores")
        order = np.lexsort((np.arange(len(scores)), -scores))
        return order[:k]

    # -- decoding --------------------------------------------------------------------

    def _decoder_keys(self, batch: EncodedBatch) -> tuple[Tensor, np.ndarray]:
        normed = _ln(self.params, "enc.final_ln", batch.states)
        return concat_encoded(normed, batch.pad_mask)

    def _decoder_logits(self, dec_tokens: np.ndarray, keys: Tensor,
                        key_valid: np.ndarray, last_only: bool = False) -> Tensor:
        states = embed_tokens(self.params, "reader", dec_tokens)
        states = decoder_stack(self.params, "dec", states, keys, key_valid, self.tcfg)
        states = _ln(self.params, "dec.final_ln", states)
        if last_only:
            states = select_position(states.reshape(1, *states.shape), states.shape[0] - 1)
        return matmul(states, self.params["out_proj"])

    def teacher_logits(self, batch: EncodedBatch, dec_in: np.ndarray) -> Tensor:
        if batch.layer != self.cfg.n_layers:
            raise ValueError("decoder needs fully encoded passages")
        keys, key_valid = self._decoder_keys(batch)
        with flops.stage("decoder"):
            return self._decoder_logits(dec_in, keys, key_valid)

    def decode_greedy(self, batch: EncodedBatch, max_len: int | None = None) -> list[int]:
        """Greedy generation over the concatenated passage states."""
        if batch.states.shape[0] == 0:
            raise ValueError("cannot decode with zero selected passages")
        max_len = self.cfg.answer_len if max_len is None else max_len
        keys, key_valid = self._decoder_keys(batch)
        prefix = [BOS]
        out: list[int] = []
        with flops.stage("decoder"):
            for _ in range(max_len):
                logits = self._decoder_logits(np.asarray(prefix, dtype=np.intp),
                                              keys, key_valid, last_only=True)
                token = int(np.argmax(logits.data[-1]))
                if token == EOS:
                    break
                out.append(token)
                prefix.append(token)
        return out

    def decode_text(self, batch: EncodedBatch, max_len: int | None = None) -> str:
        return self.vocab.decode(self.decode_greedy(batch, max_len))


# -- losses ----------------------------------------------------------------------------


def rank_loss(scores: Tensor, gold_flags: list[bool]) -> Tensor | None:
    """Listwise cross entropy toward the uniform-over-golds distribution."""
    golds = [i for i, f in enumerate(gold_flags) if f]
    if not golds:
        return None
    target = np.zeros(len(gold_flags))
    target[golds] = 1.0 / len(golds)
    return cross_entropy(scores, Tensor(target))


def joint_loss(answer_logits: Tensor, target_ids: np.ndarray, scores: Tensor,
               gold_flags: list[bool], weight: float) -> tuple[Tensor, float, float]:
    """answer_ce + weight * rank_ce; rank term masked when no gold exists."""
    if weight < 0:
        raise ValueError("rerank loss weight must be >= 0")
    answer_ce = token_cross_entropy(answer_logits, target_ids)
    rank_ce = rank_loss(scores, gold_flags) if weight > 0 else None
    if rank_ce is None:
        return answer_ce, answer_ce.item(), 0.0
    total = answer_ce + rank_ce * weight
    return total, answer_ce.item(), rank_ce.item()


# -- full pipeline passes -----------------------------------------------------------------


@dataclass
class ForwardResult:
    loss: Tensor | None
    answer_ce: float
    rank_ce: float
    selected: np.ndarray          # positions kept for decoding, decode order
    scores: np.ndarray
    gold_in_selection: bool
    batch_full: EncodedBatch | None = None


def forward_reader(model: ReaderModel, example: ReaderExample,
                   target_answer: str | None = None) -> ForwardResult:
    """One staged pass: encode, rerank, select, finish encoding, score losses.

    With ``target_answer`` None, no decoder pass runs (selection only).
    """
    cfg = model.cfg
    texts = example.passage_texts[: cfg.n_input]
    flags = list(example.gold_flags[: cfg.n_input])
    batch1 = model.encode_stage1(example.question, texts)
    scores = model.rerank_scores(batch1, example.graph)
    top = model.select_top(scores.data, min(cfg.n_decode, len(texts)))
    keep = np.sort(top)  # retriever order for decoding, see module docstring
    batch2 = model.encode_stage2(batch1, keep)
    gold_hit = any(flags[i] for i in keep)
    if target_answer is None:
        return ForwardResult(None, 0.0, 0.0, keep, scores.data.copy(), gold_hit, batch2)
    dec_in, targets = model.answer_token_ids(target_answer)
    logits = model.teacher_logits(batch2, dec_in)
    total, answer_ce, rank_ce = joint_loss(logits, targets, scores, flags,
                                           cfg.rerank_loss_weight)
    return ForwardResult(total, answer_ce, rank_ce, keep, scores.data.copy(), gold_hit, batch2)


def vanilla_forward(model: ReaderModel, example: ReaderExample,
                    target_answer: str) -> Tensor:
    """Reference path: encode every candidate through all layers, then decode."""
    texts = example.passage_texts[: model.cfg.n_input]
    batch = model.encode_monolithic(example.question, texts)
    dec_in, _ = model.answer_token_ids(target_answer)
    return model.teacher_logits(batch, dec_in)


# -- training ---------------------------------------------------------------------------


@dataclass
class ReaderTrainConfig:
    steps: int = 300
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    eval_every: int = 50
    seed: int = 0


def _pick_answer(example: ReaderExample, mode: str, rng) -> str:
    if mode == "sample" and len(example.answers) > 1:
        return example.answers[int(rng.integers(0, len(example.answers)))]
    return example.answers[0]


def validation_loss(model: ReaderModel, examples: list[ReaderExample]) -> float:
    losses = []
    with no_grad():
        for ex in examples:
            res = forward_reader(model, ex, target_answer=ex.answers[0])
            losses.append(res.answer_ce + model.cfg.rerank_loss_weight * res.rank_ce)
    return float(np.mean(losses))


def gold_selection_rate(model: ReaderModel, examples: list[ReaderExample]) -> float:
    hits = []
    with no_grad():
        for ex in examples:
            hits.append(forward_reader(model, ex).gold_in_selection)
    return float(np.mean(hits))


def train_reader(model: ReaderModel, train_examples: list[ReaderExample],
                 val_examples: list[ReaderExample],
                 cfg: ReaderTrainConfig) -> dict:
    """Joint training with linear warmup then linear decay; keeps the
    checkpoint with the lowest validation loss."""
    if not train_examples:
        raise ValueError("empty training set")
    rng = seeded_rng(cfg.seed, 3)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    warmup = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    best = {"val": float("inf"), "step": -1, "state": model.params.state_arrays()}
    history = []
    for step in range(cfg.steps):
        picks = rng.integers(0, len(train_examples), size=cfg.batch_size)
        batch_loss = None
        answer_ces, rank_ces = [], []
        for qi in picks:
            ex = train_examples[qi]
            answer = _pick_answer(ex, model.cfg.answer_target, rng)
            res = forward_reader(model, ex, target_answer=answer)
            answer_ces.append(res.answer_ce)
            rank_ces.append(res.rank_ce)
            batch_loss = res.loss if batch_loss is None else batch_loss + res.loss
        batch_loss = batch_loss * (1.0 / cfg.batch_size)
        backward(batch_loss)
        for name, p in model.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise ValueError(f"non-finite gradient in {name} at step {step}")
        opt.step(lr_scale=warmup_linear_decay(step, cfg.steps, warmup))
        opt.zero_grad()
        entry = {"step": step, "loss": batch_loss.item(),
                 "answer_ce": float(np.mean(answer_ces)),
                 "rank_ce": float(np.mean(rank_ces))}
        if val_examples and ((step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1):
            val = validation_loss(model, val_examples)
            entry["val_loss"] = val
            if val < best["val"]:
                best = {"val": val, "step": step, "state": model.params.state_arrays()}
        history.append(entry)
    if best["step"] >= 0:
        model.params.load_arrays(best["state"])
    return {"history": history, "best_step": best["step"], "best_val": best["val"]}


# -- dataset files -------------------------------------------------------------------------


def write_reader_dataset(path: str | Path, examples: list[ReaderExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "question_id": ex.question_id,
                "question": ex.question,
                "answers": ex.answers,
                "candidates": [
                    {"passage_id": int(p), "gold": bool(g)}
                    for p, g in zip(ex.passage_ids, ex.gold_flags)
                ],
                "graph_edges": [[int(i), int(j)] for i, j in (ex.graph.edges if ex.graph else [])],
            }
            fh.write(json.dumps(rec) + "\n")


def load_reader_dataset(path: str | Path, passage_text: dict[int, str],
                        passage_article: dict[int, str] | None = None) -> list[ReaderExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pids = [int(c["passage_id"]) for c in rec["candidates"]]
            graph = PassageGraph(
                passage_ids=pids,
                edges=sorted((int(i), int(j)) for i, j in rec.get("graph_edges", [])),
                article_ids=[passage_article.get(p, "") for p in pids] if passage_article else [],
            )
            examples.append(ReaderExample(
                question_id=rec["question_id"],
                question=rec["question"],
                answers=list(rec["answers"]),
                passage_ids=pids,
                passage_texts=[passage_text[p] for p in pids],
                gold_flags=[bool(c["gold"]) for c in rec["candidates"]],
                graph=graph,
            ))
    return examples
