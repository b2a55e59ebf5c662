"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import PRESETS, error_table, recall_table, run_bench, summarize
from .core import batch_delta
from .cq import encode
from .data import (VecsFormatError, read_ivecs, read_vecs,
                   resolve_data_path, synth_mixture, write_vecs)
from .model import ModelFormatError, load_codes, load_model, save_codes, save_model, sha256_file
from .search import adc_search, mean_average_precision, recall_curve
from .sparse import SparseConfig
from .training import train_model

log = logging.getLogger("vqann")

EVAL_TS = (1, 10, 50)
EVAL_RS = (1, 2, 5, 10, 20, 50, 100)
RECALL_COLUMNS = ("method", "bits", "T", "R", "recall")
MAP_COLUMNS = ("method", "bits", "MAP")


class UsageError(Exception):
    """Bad flags or missing inputs (exit code 2)."""


@dataclass
class RunManifest:
    command: list[str]
    seed: int | None
    config: dict = field(default_factory=dict)
    model_sha256: str | None = None
    dataset_sha256: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    return str(obj)


def manifest_path(artifact) -> Path:
    return Path(str(artifact) + ".json")


# ------------------------------------------------------------------ helpers

def _existing(path_arg: str, what: str) -> Path:
    path = resolve_data_path(path_arg)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_vectors(path_arg: str, what: str = "dataset") -> tuple[np.ndarray, Path]:
    path = _existing(path_arg, what)
    return read_vecs(path).vectors, path


def resolve_shape(m: int | None, k: int | None, bits: int | None) -> tuple[int, int]:
    """Fill in M or K from ``bits = M * log2 K``."""
    if bits is None:
        if m is None or k is None:
            raise UsageError("give --m and --k, or --bits with one of them")
        return m, k
    if bits <= 0:
        raise UsageError("--bits must be positive")
    if m is not None and k is not None:
        if m * math.log2(k) != bits:
            raise UsageError(f"--bits {bits} disagrees with --m {m} --k {k}")
        return m, k
    if m is not None:
        if bits % m:
            raise UsageError(f"--bits {bits} is not a multiple of --m {m}")
        return m, 2 ** (bits // m)
    k = 256 if k is None else k
    per = math.log2(k)
    if per != int(per) or bits % int(per):
        raise UsageError(f"--bits {bits} is not a multiple of log2(--k {k})")
    return bits // int(per), k


def _auto_or_float(text: str):
    if text.lower() == "auto":
        return None
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None
    if not math.isfinite(val) or val < 0:
        raise argparse.ArgumentTypeError("value must be finite and nonnegative")
    return val


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return val


def _write_csv(rows: list[dict], columns, out) -> None:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                         for k, v in row.items()})
    text = buf.getvalue()
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, newline="")


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    ds = synth_mixture(args.n, args.d, args.clusters, args.spread, args.seed)
    write_vecs(ds, args.out)
    print(f"wrote {ds.n} x {ds.d} vectors to {args.out}")
    return 0


def cmd_train(args) -> int:
    x, data_path = _load_vectors(args.data)
    m, k = resolve_shape(args.m, args.k, args.bits)
    cfg = SparseConfig(mu=args.mu, seed=args.seed, outer_iters=args.outer_iters,
                       lam=args.lam, s_budget=args.s_budget)
    if args.variant not in ("ocq", "nocq", "snocq"):
        cfg = replace(cfg, mu=0.0)
    t0 = time.perf_counter()
    model = train_model(args.variant, x, m, k, cfg)
    seconds = time.perf_counter() - t0
    for i, val in enumerate(model.train_log):
        print(f"iter {i:3d}  objective {val:.10g}")
    save_model(model, args.out)
    metrics = {"mu": model.mu, "epsilon": model.epsilon, "bits": model.bits,
               "final_objective": model.train_log[-1] if model.train_log else None,
               "train_log": model.train_log, "seconds": seconds}
    if "mu_selection" in model.diagnostics:
        metrics["mu_selection"] = model.diagnostics["mu_selection"]
    if args.codes_out:
        save_codes(model.codes, model.k, args.codes_out, batch_delta(model.codebooks, model.codes))
    RunManifest(_argv(args), args.seed,
                {"variant": model.variant, "m": m, "k": k, **_config_dict(cfg)},
                sha256_file(args.out), {"data": sha256_file(data_path)}, metrics
                ).write(manifest_path(args.out))
    print(f"saved {model.variant} model (M={m}, K={k}, mu={model.mu:.6g}) to {args.out}")
    return 0


def _config_dict(cfg) -> dict:
    out = asdict(cfg)
    out.pop("lbfgs", None)
    return out


def cmd_encode(args) -> int:
    model = load_model(_existing(args.model, "model"))
    x, data_path = _load_vectors(args.data)
    if x.shape[1] != model.d:
        raise RuntimeError(f"data has d={x.shape[1]}, model has d={model.d}")
    codes = _encode_parallel(model, x, args.threads)
    save_codes(codes, model.k, args.out, batch_delta(model.codebooks, codes))
    RunManifest(_argv(args), None, {"model": str(args.model)}, sha256_file(args.model),
                {"data": sha256_file(data_path)}, {"n": int(x.shape[0])}).write(manifest_path(args.out))
    print(f"encoded {x.shape[0]} vectors to {args.out}")
    return 0


def _encode_parallel(model, x, threads: int) -> np.ndarray:
    if threads <= 1 or x.shape[0] < 2 * threads:
        return encode(model, x)
    from concurrent.futures import ThreadPoolExecutor
    parts = np.array_split(x, threads)
    with ThreadPoolExecutor(threads) as pool:
        return np.concatenate(list(pool.map(lambda part: encode(model, part), parts)))


def _load_search_inputs(args):
    model = load_model(_existing(args.model, "model"))
    codes, k, _ = load_codes(_existing(args.codes, "codes file"))
    q, q_path = _load_vectors(args.queries, "query file")
    if codes.shape[1] != model.m or k != model.k:
        raise RuntimeError(f"codes are (M={codes.shape[1]}, K={k}), model is (M={model.m}, K={model.k})")
    if q.shape[1] != model.d:
        raise RuntimeError(f"queries have d={q.shape[1]}, model has d={model.d}")
    return model, codes, q, q_path


def cmd_search(args) -> int:
    model, codes, q, _ = _load_search_inputs(args)
    ids, scores = adc_search(model, q, codes, args.r, threads=args.threads)
    if args.out:
        write_vecs(ids.astype(np.int32), args.out, "int32")
        print(f"wrote {ids.shape[0]} x {ids.shape[1]} ids to {args.out}")
    else:
        rows = [{"query": qi, "rank": j, "id": int(ids[qi, j]), "score": float(scores[qi, j])}
                for qi in range(ids.shape[0]) for j in range(ids.shape[1])]
        _write_csv(rows, ("query", "rank", "id", "score"), None)
    return 0


def evaluate(model, codes, queries, gt, threads: int = 1, with_map: bool = True):
    """(recall rows, MAP rows) in the CSV schemas."""
    n = codes.shape[0]
    depth = n if with_map else min(max(EVAL_RS), n)
    ids, _ = adc_search(model, queries, codes, depth, threads=threads)
    curve = recall_curve(ids, gt, EVAL_TS, EVAL_RS)
    recall_rows = [{"method": model.variant, "bits": model.bits, "T": t, "R": r, "recall": v}
                   for (t, r), v in sorted(curve.items())]
    map_rows = []
    if with_map:
        map_rows.append({"method": model.variant, "bits": model.bits,
                         "MAP": mean_average_precision(ids, gt, 100)})
    return recall_rows, map_rows


def cmd_eval(args) -> int:
    model, codes, q, q_path = _load_search_inputs(args)
    gt_path = _existing(args.gt, "ground-truth file")
    gt = read_ivecs(gt_path)
    if gt.shape[0] != q.shape[0]:
        raise RuntimeError(f"{gt.shape[0]} ground-truth rows for {q.shape[0]} queries")
    if gt.size and gt.max() >= codes.shape[0]:
        raise RuntimeError("ground truth references ids beyond the encoded base")
    recall_rows, map_rows = evaluate(model, codes, q, gt, args.threads, not args.no_map)
    _write_csv(recall_rows, RECALL_COLUMNS, args.out)
    if map_rows:
        map_out = args.map_out or (None if args.out in (None, "-") else _sibling(args.out, "_map"))
        if map_out is None:
            sys.stdout.write("\n")
        _write_csv(map_rows, MAP_COLUMNS, map_out)
    if args.out not in (None, "-"):
        RunManifest(_argv(args), None, {"model": str(args.model)}, sha256_file(args.model),
                    {"queries": sha256_file(q_path), "gt": sha256_file(gt_path)},
                    {"recall": recall_rows, "map": map_rows}).write(manifest_path(args.out))
    return 0


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix + p.suffix)


def cmd_bench(args) -> int:
    preset = PRESETS[args.preset]
    if args.seeds is not None:
        preset = replace(preset, seeds=tuple(range(args.seeds)))
    t0 = time.perf_counter()
    records = run_bench(preset, with_map=args.map)
    seconds = time.perf_counter() - t0
    summary = summarize(records)
    print(f"{'method':<6} {'error':>12} {'recall@10':>10}")
    for method, row in summary.items():
        print(f"{method:<6} {row['error']:>12.2f} {row['recall@10']:>10.4f}")
    print(f"({len(records)} runs, {seconds:.1f}s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(error_table(records), ("seed", "method", "bits", "error", "mu"), out / "errors.csv")
        _write_csv(recall_table(records), ("seed", "method", "bits", "T", "R", "recall"), out / "recall.csv")
        if args.map:
            _write_csv([{"seed": r.seed, "method": r.variant, "bits": r.bits, "MAP": r.map}
                        for r in records], ("seed", "method", "bits", "MAP"), out / "map.csv")
        logs = {f"{r.variant}/{r.seed}": r.train_log for r in records}
        (out / "train_logs.json").write_text(json.dumps(logs, indent=1))
        RunManifest(_argv(args), None, asdict(preset), None, {},
                    {"summary": summary, "seconds": seconds}).write(out / "manifest.json")
    return 0


def _argv(args) -> list[str]:
    return sys.argv[:] if args.argv is None else args.argv


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqann", description="Composite-quantization toolkit for ANN search.")
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic Gaussian-mixture dataset")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--d", type=_positive_int, required=True)
    s.add_argument("--clusters", type=_positive_int, default=10)
    s.add_argument("--spread", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a quantizer")
    t.add_argument("--data", required=True, help="fvecs/bvecs file (relative to $VQANN_DATA_DIR)")
    t.add_argument("--variant", required=True, type=str.lower,
                   choices=["pq", "ckm", "cq", "ocq", "nocq", "snocq"])
    t.add_argument("--m", type=_positive_int)
    t.add_argument("--k", type=_positive_int)
    t.add_argument("--bits", type=_positive_int, help="M * log2 K; fills in whichever of --m/--k is missing")
    t.add_argument("--mu", type=_auto_or_float, default=None, help="penalty weight or 'auto' (default)")
    t.add_argument("--lambda", dest="lam", type=_auto_or_float, default=0.0,
                   help="L1 weight for snocq, or 'auto'")
    t.add_argument("--s-budget", type=_positive_int, default=None, help="nonzero budget for snocq (default K*D)")
    t.add_argument("--outer-iters", type=int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--codes-out", help="also write the training-set codes")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode vectors with a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threads", type=_positive_int, default=1)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    for name, func, help_ in (("search", cmd_search, "ADC search"), ("eval", cmd_eval, "recall and MAP")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--model", required=True)
        c.add_argument("--codes", required=True)
        c.add_argument("--queries", required=True)
        c.add_argument("--threads", type=_positive_int, default=1)
        c.add_argument("--out")
        if name == "search":
            c.add_argument("--r", type=_positive_int, default=100)
        else:
            c.add_argument("--gt", required=True, help="ivecs ground truth")
            c.add_argument("--map-out", help="MAP CSV path (default: <out>_map.csv)")
            c.add_argument("--no-map", action="store_true")
        c.set_defaults(func=func)

    b = sub.add_parser("bench", help="desk-scale comparison on synthetic data")
    b.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    b.add_argument("--seeds", type=_positive_int, help="use seeds 0..n-1 instead of the preset's")
    b.add_argument("--map", action="store_true", help="also compute MAP (full ranking)")
    b.add_argument("--out", help="directory for CSV tables and the manifest")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vqann: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, VecsFormatError, ModelFormatError, OSError) as exc:
        print(f"vqann: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
