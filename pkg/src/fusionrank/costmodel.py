"""Analytic encoder/decoder cost formulas and the measured-FLOP reconciliation.

Analytic units: the encoder term (L1*N1 + (L-L1)*N2) * T_p^2 and the decoder
term L * (N2*T_p*T_a + T_a^2), with unit constants set to 1. Measured counts
come from the matmul ledger of an instrumented forward pass: the staged
pipeline and a vanilla single-pass reference, each greedy-decoding the same
fixed number of answer tokens so the two runs stay comparable.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import flops
from .flops import CounterNotResetError, FlopCounter
from .reader import EncodedBatch, ReaderExample, ReaderModel
from .tensor import no_grad

ENCODER_STAGES = ("encoder_stage1", "encoder_stage2")


def _check_bounds(n_layers: int, rerank_layer: int, n_input: int, n_decode: int) -> None:
    if not (1 <= rerank_layer <= n_layers):
        raise ValueError(f"rerank layer {rerank_layer} outside [1, {n_layers}]")
    if not (1 <= n_decode <= n_input):
        raise ValueError(f"decode count {n_decode} outside [1, {n_input}]")


def saving_fraction(n_layers: int, rerank_layer: int, n_input: int, n_decode: int) -> Fraction:
    """(1 - L1/L) * (1 - N2/N1) in exact rational arithmetic."""
    _check_bounds(n_layers, rerank_layer, n_input, n_decode)
    return Fraction((n_layers - rerank_layer) * (n_input - n_decode), n_layers * n_input)


def cost_percent(n_layers: int, rerank_layer: int, n_input: int, n_decode: int) -> Fraction:
    """Exact remaining-cost percentage: 100 * (1 - saving)."""
    return 100 * (1 - saving_fraction(n_layers, rerank_layer, n_input, n_decode))


def saving_ratio(n_layers: int, rerank_layer: int, n_input: int, n_decode: int) -> float:
    """Float view of ``saving_fraction`` (single rounding)."""
    return float(saving_fraction(n_layers, rerank_layer, n_input, n_decode))


@dataclass
class CostConfig:
    n_layers: int
    rerank_layer: int
    n_input: int
    n_decode: int
    passage_len: int
    answer_len: int
    d_model: int = 64

    def vanilla(self) -> "CostConfig":
        return CostConfig(self.n_layers, self.n_layers, self.n_input, self.n_input,
                          self.passage_len, self.answer_len, self.d_model)


def analytic_costs(cfg: CostConfig) -> tuple[float, float]:
    """(encoder_units, decoder_units) for the staged configuration."""
    enc = (cfg.rerank_layer * cfg.n_input
           + (cfg.n_layers - cfg.rerank_layer) * cfg.n_decode) * cfg.passage_len**2
    dec = cfg.n_layers * (cfg.n_decode * cfg.passage_len * cfg.answer_len
                          + cfg.answer_len**2)
    return float(enc), float(dec)


@dataclass
class CostReport:
    config: dict
    analytic_encoder_flops: float
    analytic_decoder_flops: float
    analytic_saving_ratio: float
    measured_encoder_flops: int
    measured_decoder_flops: int
    measured_reranker_flops: int
    measured_total_flops: int
    vanilla_encoder_flops: int
    vanilla_decoder_flops: int
    vanilla_total_flops: int
    measured_saving_ratio: float
    measured_encoder_saving_ratio: float
    measured_attention_flops: int
    vanilla_attention_flops: int
    wall_seconds: float
    vanilla_wall_seconds: float
    breakdown: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _decode_fixed(model: ReaderModel, batch: EncodedBatch, steps: int) -> None:
    """Greedy-decode exactly ``steps`` tokens (EOS ignored) for fair counting."""
    keys, key_valid = model._decoder_keys(batch)
    prefix = [1]  # any fixed start token; cost does not depend on the value
    with flops.stage("decoder"):
        for _ in range(steps):
            logits = model._decoder_logits(np.asarray(prefix, dtype=np.intp),
                                           keys, key_valid, last_only=True)
            prefix.append(int(np.argmax(logits.data[-1])))


def _staged_pass(model: ReaderModel, example: ReaderExample) -> None:
    texts = example.passage_texts[: model.cfg.n_input]
    batch1 = model.encode_stage1(example.question, texts)
    scores = model.rerank_scores(batch1, example.graph)
    keep = np.sort(model.select_top(scores.data, min(model.cfg.n_decode, len(texts))))
    batch2 = model.encode_stage2(batch1, keep)
    _decode_fixed(model, batch2, model.cfg.answer_len)


def _vanilla_pass(model: ReaderModel, example: ReaderExample) -> None:
    texts = example.passage_texts[: model.cfg.n_input]
    batch = model.encode_monolithic(example.question, texts)
    _decode_fixed(model, batch, model.cfg.answer_len)


def measure_run(model: ReaderModel, example: ReaderExample,
                counter: FlopCounter | None = None,
                vanilla_counter: FlopCounter | None = None) -> CostReport:
    """Instrument one staged forward and one vanilla forward, reconcile both.

    Provided counters must be freshly reset; measured counts are exact
    integers and identical across repeated runs.
    """
    counter = counter or FlopCounter()
    vanilla_counter = vanilla_counter or FlopCounter()
    for c in (counter, vanilla_counter):
        if c.total != 0:
            raise CounterNotResetError("FLOP counter must be reset before a measured run")

    cfg = model.cfg
    cost_cfg = CostConfig(cfg.n_layers, cfg.rerank_layer, cfg.n_input, cfg.n_decode,
                          cfg.passage_len, cfg.answer_len, cfg.d_model)
    with no_grad():
        t0 = time.perf_counter()
        with flops.active(counter):
            _staged_pass(model, example)
        t1 = time.perf_counter()
        with flops.active(vanilla_counter):
            _vanilla_pass(model, example)
        t2 = time.perf_counter()

    enc = counter.stage_total(*ENCODER_STAGES)
    dec = counter.stage_total("decoder")
    rr = counter.stage_total("reranker")
    v_enc = vanilla_counter.stage_total(*ENCODER_STAGES)
    v_dec = vanilla_counter.stage_total("decoder")
    analytic_enc, analytic_dec = analytic_costs(cost_cfg)
    return CostReport(
        config=asdict(cost_cfg),
        analytic_encoder_flops=analytic_enc,
        analytic_decoder_flops=analytic_dec,
        analytic_saving_ratio=saving_ratio(cfg.n_layers, cfg.rerank_layer,
                                           cfg.n_input, cfg.n_decode),
        measured_encoder_flops=enc,
        measured_decoder_flops=dec,
        measured_reranker_flops=rr,
        measured_total_flops=counter.total,
        vanilla_encoder_flops=v_enc,
        vanilla_decoder_flops=v_dec,
        vanilla_total_flops=vanilla_counter.total,
        measured_saving_ratio=1.0 - counter.total / vanilla_counter.total,
        measured_encoder_saving_ratio=1.0 - enc / v_enc,
        measured_attention_flops=counter.kind_total("attention", *ENCODER_STAGES),
        vanilla_attention_flops=vanilla_counter.kind_total("attention", *ENCODER_STAGES),
        wall_seconds=t1 - t0,
        vanilla_wall_seconds=t2 - t1,
        breakdown={"staged": counter.as_dict(), "vanilla": vanilla_counter.as_dict()},
    )


def cost_table(n_layers: int, n_input: int, n_decode: int,
               rerank_layers: list[int] | None = None) -> list[dict]:
    """Rows of (config, analytic cost %) for a sweep over the rerank layer."""
    rows = []
    for l1 in rerank_layers or [n_layers // 4, n_layers // 2, 3 * n_layers // 4, n_layers]:
        pct = cost_percent(n_layers, l1, n_input, n_decode)
        rows.append({
            "n_layers": n_layers, "rerank_layer": l1,
            "n_input": n_input, "n_decode": n_decode,
            "cost_pct": float(pct),
            "saving_pct": float(100 - pct),
        })
    return rows


def render_cost_table(rows: list[dict], metrics: dict[str, dict] | None = None) -> str:
    """Plain-text table: one row per configuration, cost column, metric columns."""
    metric_names = sorted({k for m in (metrics or {}).values() for k in m})
    header = ["model", "cost"] + metric_names
    lines = ["  ".join(f"{h:>18}" for h in header)]
    for row in rows:
        label = f"staged(L1={row['rerank_layer']}/{row['n_layers']})"
        if row["rerank_layer"] == row["n_layers"]:
            label = f"vanilla(L={row['n_layers']})"
        cells = [label, f"{row['cost_pct']:.0f}%"]
        row_metrics = (metrics or {}).get(label, {})
        cells += [f"{row_metrics.get(m, float('nan')):.4f}" for m in metric_names]
        lines.append("  ".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)
