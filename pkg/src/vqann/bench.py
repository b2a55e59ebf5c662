"""Desk-scale comparison of PQ, CKM, CQ, OCQ and NOCQ over several seeds."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import train_ckm, train_pq
from .core import quantization_error
from .cq import TrainConfig, train_cq, train_nocq, train_ocq
from .data import brute_force_groundtruth, synth_mixture
from .model import QuantizerModel
from .search import adc_search, mean_average_precision, recall_at_r

log = logging.getLogger(__name__)

BENCH_VARIANTS = ("PQ", "CKM", "CQ", "OCQ", "NOCQ")
RECALL_TS = (1, 10, 50)
RECALL_RS = (1, 2, 5, 10, 20, 50, 100)


@dataclass(frozen=True)
class BenchPreset:
    n_base: int
    n_queries: int
    d: int
    m: int
    k: int
    n_clusters: int
    spread: float
    seeds: tuple[int, ...]
    outer_iters: int = 30
    select_outer_iters: int = 5
    validation_max_queries: int = 300
    mu_scales: tuple[float, ...] = (0.1, 1.0, 10.0)
    variants: tuple[str, ...] = BENCH_VARIANTS


PRESETS = {
    "desk": BenchPreset(n_base=10_000, n_queries=1000, d=32, m=4, k=16, n_clusters=10,
                        spread=0.2, seeds=(0, 1, 2, 3, 4)),
    "smoke": BenchPreset(n_base=1500, n_queries=100, d=16, m=2, k=16, n_clusters=10,
                         spread=0.2, seeds=(0,), outer_iters=8, select_outer_iters=4,
                         validation_max_queries=100),
}


@dataclass
class RunRecord:
    seed: int
    variant: str
    bits: int
    error: float
    recall: dict              # {(T, R): value}
    map: float
    mu: float
    train_log: list
    seconds: float
    diagnostics: dict = field(default_factory=dict)
    model: QuantizerModel | None = field(default=None, repr=False, compare=False)


def bench_data(preset: BenchPreset, seed: int):
    ds = synth_mixture(preset.n_base + preset.n_queries, preset.d, preset.n_clusters,
                       preset.spread, seed).vectors
    return ds[:preset.n_base], ds[preset.n_base:]


def _train(variant: str, x, preset: BenchPreset, seed: int) -> QuantizerModel:
    cfg = TrainConfig(seed=seed, outer_iters=preset.outer_iters,
                      select_outer_iters=preset.select_outer_iters,
                      validation_max_queries=preset.validation_max_queries,
                      mu_scales=preset.mu_scales)
    if variant == "PQ":
        cb, codes = train_pq(x, preset.m, preset.k, seed=seed)
        err = quantization_error(cb, codes, x)
        return QuantizerModel("PQ", cb, train_log=[err], codes=codes)
    if variant == "CKM":
        res = train_ckm(x, preset.m, preset.k, seed=seed, outer_iters=preset.outer_iters)
        return QuantizerModel("CKM", res.codebooks, rotation=res.rotation,
                              train_log=list(res.history), codes=res.codes)
    if variant == "CQ":
        return train_cq(x, preset.m, preset.k, replace(cfg, mu=0.0))
    if variant == "OCQ":
        return train_ocq(x, preset.m, preset.k, cfg)
    if variant == "NOCQ":
        return train_nocq(x, preset.m, preset.k, cfg)
    raise ValueError(f"unsupported bench variant {variant!r}")


def run_bench(preset: BenchPreset | str = "desk", seeds=None, variants=None,
              with_map: bool = False, keep_models: bool = False) -> list[RunRecord]:
    if isinstance(preset, str):
        preset = PRESETS[preset]
    records = []
    for seed in seeds if seeds is not None else preset.seeds:
        x, q = bench_data(preset, seed)
        gt = brute_force_groundtruth(x, q, 100).neighbors
        for variant in variants or preset.variants:
            t0 = time.perf_counter()
            model = _train(variant, x, preset, seed)
            seconds = time.perf_counter() - t0
            ids, _ = adc_search(model, q, model.codes, max(RECALL_RS))
            recall = {(t, r): recall_at_r(ids, gt, t, r) for t in RECALL_TS for r in RECALL_RS}
            mean_ap = float("nan")
            if with_map:
                full, _ = adc_search(model, q, model.codes, x.shape[0])
                mean_ap = mean_average_precision(full, gt, 100)
            rec = RunRecord(seed, variant, model.bits, quantization_error(model.codebooks, model.codes, x),
                            recall, mean_ap, model.mu, list(model.train_log), seconds,
                            {k: v for k, v in model.diagnostics.items() if k != "mu_selection"},
                            model if keep_models else None)
            log.info("seed %d %-4s error=%.2f R@10=%.3f (%.1fs)", seed, variant, rec.error,
                     recall[(1, 10)], seconds)
            records.append(rec)
    return records


def summarize(records: list[RunRecord]) -> dict:
    """Per-variant means of error and recall@10 (T=1)."""
    out = {}
    for v in dict.fromkeys(r.variant for r in records):
        rows = [r for r in records if r.variant == v]
        out[v] = {"error": float(np.mean([r.error for r in rows])),
                  "recall@10": float(np.mean([r.recall[(1, 10)] for r in rows])),
                  "runs": len(rows)}
    return out


def error_table(records: list[RunRecord]) -> list[dict]:
    return [{"seed": r.seed, "method": r.variant, "bits": r.bits, "error": r.error, "mu": r.mu}
            for r in records]


def recall_table(records: list[RunRecord]) -> list[dict]:
    rows = []
    for r in records:
        for (t, rr), val in sorted(r.recall.items()):
            rows.append({"seed": r.seed, "method": r.variant, "bits": r.bits, "T": t, "R": rr,
                         "recall": val})
    return rows


def preset_dict(preset: BenchPreset) -> dict:
    return asdict(preset)
