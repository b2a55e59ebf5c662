"""One entry point that trains any supported variant."""

from __future__ import annotations

from dataclasses import fields, replace

from .baselines import train_ckm, train_pq
from .core import quantization_error
from .cq import TrainConfig, train_cq, train_nocq, train_ocq
from .data import as_matrix
from .model import VARIANTS, QuantizerModel
from .sparse import SparseConfig, train_snocq


def as_sparse_config(config: TrainConfig | None) -> SparseConfig:
    if config is None:
        return SparseConfig()
    if isinstance(config, SparseConfig):
        return config
    return SparseConfig(**{f.name: getattr(config, f.name) for f in fields(TrainConfig)})


def train_model(variant: str, dataset, m: int, k: int,
                config: TrainConfig | None = None) -> QuantizerModel:
    """Train ``variant`` (case-insensitive) and return a model with training codes attached."""
    v = variant.upper()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    x = as_matrix(dataset)
    cfg = config or TrainConfig()
    if v == "PQ":
        cb, codes = train_pq(x, m, k, kmeans_iters=cfg.kmeans_iters, seed=cfg.seed)
        return QuantizerModel("PQ", cb, train_log=[quantization_error(cb, codes, x)], codes=codes)
    if v == "CKM":
        res = train_ckm(x, m, k, kmeans_iters=cfg.kmeans_iters, outer_iters=cfg.outer_iters,
                        seed=cfg.seed, rel_tol=cfg.rel_tol)
        return QuantizerModel("CKM", res.codebooks, rotation=res.rotation,
                              train_log=list(res.history), codes=res.codes)
    if v == "CQ":
        return train_cq(x, m, k, replace(cfg, mu=0.0))
    if v == "OCQ":
        return train_ocq(x, m, k, cfg)
    if v == "NOCQ":
        return train_nocq(x, m, k, cfg)
    return train_snocq(x, m, k, as_sparse_config(cfg))
