"""Command-line testbed: kernel benchmarks, training runs, the ablation
table, and tensor-file inspection. Every command is deterministic given its
seed; reports are plain text by default and JSON with --json.

Exit codes: 0 success, 2 usage/format/config errors, 3 training divergence.
"""

import argparse
import json
import statistics
import sys
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import CONFIG_SCHEMA, build_configs, parse_config_file
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .ffn import FfnConfig, FfnParams, ffn_forward
from .matcore import MATRIX_MAGIC, WORKING, gemm, gemm_macs, read_matrix
from .sparse24 import (
    FEATURE_WISE,
    SPARSE_MAGIC,
    TOKEN_WISE,
    decompress,
    read_sparse,
    sp_gemm,
    sp_gemm_macs,
    sparsify_feature_wise,
    sparsify_token_wise,
    write_sparse,
)
from .splitgemm import column_nonzero_counts, partition_features, split_gemm_macs, split_gemm_t
from .train import (
    ABLATION_ROWS,
    ablate,
    json_safe,
    metrics_to_csv,
    save_checkpoint,
    summary_dict,
    train,
)

BENCH_OPS = ("gemm", "spgemm", "splitgemm", "ffn-fwd")


@dataclass
class BenchReport:
    op: str
    m: int
    n: int
    k: int
    split_ratio: float | None
    sparsity: float
    seed: int
    iters: int
    wall_time_ns: int
    mac_count: int
    effective_gmacs_per_s: float
    checksum: str


def _checksum(a: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(a).tobytes()) & 0xFFFFFFFF:08x}"


def _random_operand(rng, rows, cols, sparsity):
    vals = rng.standard_normal((rows, cols)).astype(WORKING)
    if sparsity > 0:
        keep = rng.random((rows, cols)) >= sparsity
        vals = np.where(keep, vals, np.float32(0))
    return vals


def _timed(fn, iters: int, warmup: int):
    for _ in range(warmup):
        out = fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        out = fn()
        times.append(time.perf_counter_ns() - t0)
    return out, int(statistics.median(times))


def run_bench(op, m, n, k, sparsity, ratio, iters, warmup, seed):
    """Build seeded operands, time the kernel, and report exact MAC counts."""
    rng = np.random.Generator(np.random.PCG64(seed))
    reports = []

    def report(name, out, elapsed, macs, split_ratio=None):
        reports.append(
            BenchReport(
                op=name,
                m=m,
                n=n,
                k=k,
                split_ratio=split_ratio,
                sparsity=sparsity,
                seed=seed,
                iters=iters,
                wall_time_ns=elapsed,
                mac_count=macs,
                effective_gmacs_per_s=macs / elapsed if elapsed else 0.0,
                checksum=_checksum(out),
            )
        )

    if op == "gemm":
        a = _random_operand(rng, m, k, sparsity)
        b = _random_operand(rng, k, n, 0.0)
        out, elapsed = _timed(lambda: gemm(a, b), iters, warmup)
        report("gemm", out, elapsed, gemm_macs(m, k, n))
    elif op == "spgemm":
        if k % 4:
            raise ConfigError("spgemm needs k divisible by 4")
        a = _random_operand(rng, m, k, sparsity)
        s, _, _ = sparsify_token_wise(a)
        b = _random_operand(rng, k, n, 0.0)
        out, elapsed = _timed(lambda: sp_gemm(s, b), iters, warmup)
        report("spgemm", out, elapsed, sp_gemm_macs(m, k, n))
    elif op == "splitgemm":
        # computes A^T B for A [k tokens, m features]; --ratio picks the split
        if k % 4 or m % 4:
            raise ConfigError("splitgemm needs k and m divisible by 4")
        a = _random_operand(rng, k, m, sparsity)
        _, mask, _ = sparsify_token_wise(a)
        b = _random_operand(rng, k, n, 0.0)
        plan = partition_features(column_nonzero_counts(a), ratio)
        out, elapsed = _timed(lambda: split_gemm_t(a, mask, b, plan), iters, warmup)
        report("splitgemm", out, elapsed, split_gemm_macs(k, n, plan), split_ratio=ratio)
    elif op == "ffn-fwd":
        # x [m, k] through a k->n->k FFN, dense pipeline vs sparse pipeline
        if m % 4 or n % 4:
            raise ConfigError("ffn-fwd needs m and n divisible by 4")
        x = _random_operand(rng, m, k, 0.0)
        params = FfnParams(
            w1=_random_operand(rng, k, n, 0.0),
            w2=_random_operand(rng, n, k, 0.0),
        )
        dense_cfg = FfnConfig()
        sparse_cfg = FfnConfig(
            forward_mode="sparse24", mask_grad_with_fwd=True, permute_tokens=True
        )
        out, elapsed = _timed(lambda: ffn_forward(x, params, dense_cfg)[0], iters, warmup)
        report("ffn-fwd-dense", out, elapsed, 2 * gemm_macs(m, k, n))
        out, elapsed = _timed(lambda: ffn_forward(x, params, sparse_cfg)[0], iters, warmup)
        report("ffn-fwd-sparse24", out, elapsed, gemm_macs(m, k, n) + sp_gemm_macs(m, n, k))
    else:
        raise ConfigError(f"unknown bench op {op!r}")
    return reports


def _print_reports(reports, as_json):
    if as_json:
        print(json.dumps([asdict(r) for r in reports], indent=2))
        return
    for r in reports:
        ratio = "-" if r.split_ratio is None else f"{r.split_ratio}"
        print(
            f"{r.op}: m={r.m} n={r.n} k={r.k} ratio={ratio} sparsity={r.sparsity} "
            f"macs={r.mac_count} median_ns={r.wall_time_ns} "
            f"gmacs/s={r.effective_gmacs_per_s:.3f} checksum={r.checksum}"
        )


# ---------------------------------------------------------------------------
# train / ablate
# ---------------------------------------------------------------------------


def _load_run_config(args):
    values = parse_config_file(args.config)
    for key in CONFIG_SCHEMA:
        override = getattr(args, key, None)
        if override is not None:
            values[key] = override
    model_cfg, train_cfg, corpus = build_configs(values)
    if args.corpus is not None:
        corpus = args.corpus
    if corpus is None:
        raise ConfigError("no corpus given (config key 'corpus' or --corpus)")
    if not Path(corpus).exists():
        raise DataError(f"corpus file not found: {corpus}")
    return model_cfg, train_cfg, corpus


def cmd_train(args) -> int:
    model_cfg, train_cfg, corpus = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    divergence_step = None
    metrics = []
    model = None
    try:
        metrics, model = train(model_cfg, train_cfg, corpus)
    except DivergenceError as exc:
        divergence_step = exc.step
        print(f"divergence detected at step {exc.step}", file=sys.stderr)
    (out / "metrics.csv").write_text(metrics_to_csv(metrics))
    summary = summary_dict(model_cfg, train_cfg, corpus, metrics, divergence_step)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if model is not None:
        save_checkpoint(out / "checkpoint", model, model_cfg, train_cfg, train_cfg.steps, corpus)
    if not args.quiet:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 3 if divergence_step is not None else 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg, corpus = _load_run_config(args)
    rows = args.rows.split(",") if args.rows else None
    results = ablate(corpus, model_cfg, train_cfg, rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["key,experiment,final_train_loss,final_eval_loss,diverged,divergence_step"]
    for r in results:
        step = "" if r.divergence_step is None else str(r.divergence_step)
        lines.append(
            f'{r.key},"{r.label}",{r.final_train_loss!r},{r.final_eval_loss!r},'
            f"{str(r.diverged).lower()},{step}"
        )
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    payload = json_safe({
        "seed": train_cfg.seed,
        "model_seed": model_cfg.seed,
        "corpus": str(corpus),
        "rows": [asdict(r) for r in results],
    })
    (out / "ablate.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        for r in results:
            status = f"diverged at step {r.divergence_step}" if r.diverged else "ok"
            print(f"{r.label}: eval_loss={r.final_eval_loss} ({status})")
    return 0


# ---------------------------------------------------------------------------
# inspect / sparsify
# ---------------------------------------------------------------------------


def _dense_stats(a: np.ndarray) -> dict:
    rows, cols = a.shape
    total = a.size
    nonzero = int(np.count_nonzero(a))
    counts = column_nonzero_counts(a) if rows else np.zeros(cols, dtype=np.int64)
    hist: dict[str, int] = {}
    if cols:
        vals, freq = np.unique(counts, return_counts=True)
        hist = {str(int(v)): int(f) for v, f in zip(vals, freq)}

    def compliance(groups):
        nz = np.count_nonzero(groups, axis=-1)
        return float(np.mean(nz <= 2)) if nz.size else 1.0

    token = compliance(a.reshape(rows, cols // 4, 4)) if cols and cols % 4 == 0 else None
    feature = (
        compliance(a.reshape(rows // 4, 4, cols).transpose(0, 2, 1))
        if rows and rows % 4 == 0
        else None
    )
    return {
        "rows": rows,
        "cols": cols,
        "nonzeros": nonzero,
        "sparsity": 1.0 - nonzero / total if total else 1.0,
        "column_count_histogram": hist,
        "compliance_token_wise": token,
        "compliance_feature_wise": feature,
    }


def cmd_inspect(args) -> int:
    blob = Path(args.path).read_bytes()[:4]
    if blob == MATRIX_MAGIC:
        stats = {"format": "dense", **_dense_stats(read_matrix(args.path))}
    elif blob == SPARSE_MAGIC:
        s = read_sparse(args.path)
        stats = {"format": "sparse24", "orientation": s.orientation, **_dense_stats(decompress(s))}
    else:
        raise FormatError(f"unrecognized magic {blob!r}", offset=0)
    if args.json:
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        for key, value in stats.items():
            if key == "column_count_histogram":
                nz = [int(k) for k, v in value.items() for _ in range(v)]
                lo = min(nz) if nz else 0
                hi = max(nz) if nz else 0
                print(f"column nonzero counts: min={lo} max={hi}")
            else:
                print(f"{key}: {value}")
    return 0


def cmd_sparsify(args) -> int:
    a = read_matrix(args.path)
    sparsify = sparsify_token_wise if args.orientation == TOKEN_WISE else sparsify_feature_wise
    s, _, stats = sparsify(a)
    out = args.out or str(args.path) + ".s24c"
    write_sparse(out, s)
    payload = {
        "input": str(args.path),
        "output": str(out),
        "orientation": s.orientation,
        "total_entries": stats.total_entries,
        "nonzeros_before": stats.nonzeros_before,
        "nonzeros_after": stats.nonzeros_after,
        "dropped": stats.dropped,
        "sparsity_before": stats.sparsity_before,
        "dropped_fraction_of_nonzeros": stats.dropped_fraction_of_nonzeros,
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(
            f"wrote {out}: dropped {stats.dropped} of {stats.nonzeros_before} nonzeros "
            f"({stats.dropped_fraction_of_nonzeros:.4%})"
        )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_override_flags(parser: argparse.ArgumentParser):
    for key, (_, typ) in CONFIG_SCHEMA.items():
        if key == "corpus":
            continue
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            parser.add_argument(flag, type=_cli_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, type=typ, default=None)


def _cli_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srelu24",
        description="2:4 activation-sparsity testbed: benchmarks, training, ablations, inspection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="time a kernel and report exact MAC counts")
    b.add_argument("--op", required=True, choices=BENCH_OPS)
    b.add_argument("--m", type=int, default=128)
    b.add_argument("--n", type=int, default=128)
    b.add_argument("--k", type=int, default=128)
    b.add_argument("--sparsity", type=float, default=0.9)
    b.add_argument("--ratio", type=float, default=0.95)
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--warmup-iters", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", action="store_true")

    t = sub.add_parser("train", help="train the toy model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", default=None)
    t.add_argument("--out", default="train_out")
    t.add_argument("--quiet", action="store_true")
    _add_override_flags(t)

    a = sub.add_parser("ablate", help="run the seven-row ablation table")
    a.add_argument("--config", required=True)
    a.add_argument("--corpus", default=None)
    a.add_argument("--out", default="ablate_out")
    a.add_argument("--rows", default=None, help="comma-separated subset: " + ",".join(k for k, _ in ABLATION_ROWS))
    a.add_argument("--quiet", action="store_true")
    _add_override_flags(a)

    i = sub.add_parser("inspect", help="print stats for a matrix or 2:4 file")
    i.add_argument("path")
    i.add_argument("--json", action="store_true")

    s = sub.add_parser("sparsify", help="2:4-sparsify a matrix file")
    s.add_argument("path")
    s.add_argument("--orientation", choices=(TOKEN_WISE, FEATURE_WISE), default=TOKEN_WISE)
    s.add_argument("--out", default=None)
    s.add_argument("--json", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench":
            reports = run_bench(
                args.op, args.m, args.n, args.k, args.sparsity, args.ratio,
                args.iters, args.warmup_iters, args.seed,
            )
            _print_reports(reports, args.json)
            return 0
        if args.command == "train":
            return cmd_train(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "inspect":
            return cmd_inspect(args)
        if args.command == "sparsify":
            return cmd_sparsify(args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
