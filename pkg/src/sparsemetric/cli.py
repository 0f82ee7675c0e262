"""Command-line entry point: ``sparsemetric <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 file format or I/O error,
4 numeric failure (non-finite values, gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import apps, formats
from .evaluation import GroundTruth, evaluate, histogram_text, similarity_histogram
from .gradcheck import run_gradcheck
from .losses import LossSpec, loss_value
from .metric import ConfigError, MetricConfig, MetricParams, Variant, init_identity, materialize_dense, param_count, score_matrix
from .synth import parse_kv, parse_spec_text, synth_gen
from .train import NumericError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4

BLOCK_RATIO_HELP = (
    "number of blocks N = D/d, alternative to --block-size. Suggested: 1024 for holistic "
    "(pooled, dual-encoder) features, 4 for token-interaction features."
)


class UsageError(Exception):
    pass


def _metric_args(p, with_dim=False):
    p.add_argument("--metric", choices=[v.value for v in Variant], default="bdiag")
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--block-ratio", type=int, default=None, help=BLOCK_RATIO_HELP)
    if with_dim:
        p.add_argument("--dim", type=int, default=16)


def _loss_args(p):
    p.add_argument("--loss", choices=["triplet", "infonce", "cmpm", "poly"], default="triplet")
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--temp", type=float, default=0.05)
    p.add_argument("--poly-order", type=int, default=2)


def _pair_args(p):
    p.add_argument("--features-x", required=True)
    p.add_argument("--features-y", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsemetric", description="Structured sparse bilinear metric learning.")
    parser.add_argument("--config", help="key=value file; command-line flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a metric on paired features and write a checkpoint")
    _pair_args(p)
    _metric_args(p)
    _loss_args(p)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--weight-dropout", type=float, default=0.0)
    p.add_argument("--init", choices=["identity", "random"], default="identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="retrieval report for a checkpoint (or a parameter-free metric)")
    _pair_args(p)
    p.add_argument("--ckpt")
    p.add_argument("--metric", choices=[v.value for v in Variant], default="cosine")
    p.add_argument("--gt", help="text file, line q lists the gallery indices relevant to query q")
    p.add_argument("--csv", help="also write the report as CSV")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    _metric_args(p, with_dim=True)
    _loss_args(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic paired data set")
    p.add_argument("--spec-file", required=True)
    p.add_argument("--out-x", required=True)
    p.add_argument("--out-y", required=True)

    p = sub.add_parser("align", help="token-wise alignment score of two token sets")
    p.add_argument("--tokens-a", required=True)
    p.add_argument("--tokens-b", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--strategy", choices=["maxave", "maxsum", "maxsoft"], default="maxave")
    p.add_argument("--tau", type=float, default=0.1)

    p = sub.add_parser("attention", help="metric-scored attention over key/value files")
    p.add_argument("--query", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--value", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("distill", help="task loss plus teacher-to-student KL on a batch")
    _pair_args(p)
    p.add_argument("--teacher-ckpt", required=True)
    p.add_argument("--student-ckpt", help="student metric; cosine when omitted")
    _loss_args(p)
    p.add_argument("--tau", type=float, default=0.05)

    p = sub.add_parser("stats", help="positive/negative score histograms")
    _pair_args(p)
    p.add_argument("--ckpt")
    p.add_argument("--gt")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    return parser


def _metric_config(args, dim: int) -> MetricConfig:
    v = Variant(args.metric)
    if v is not Variant.BLOCKDIAG:
        return MetricConfig(v, dim)
    if args.block_size is not None and args.block_ratio is not None:
        raise UsageError("give either --block-size or --block-ratio, not both")
    if args.block_ratio is not None:
        return MetricConfig.from_ratio(dim, args.block_ratio)
    if args.block_size is None:
        raise UsageError("bdiag needs --block-size or --block-ratio")
    return MetricConfig(v, dim, args.block_size)


def _loss_spec(args) -> LossSpec:
    return LossSpec(args.loss, margin=args.margin, temperature=args.temp, poly_order=args.poly_order)


def _features(path) -> np.ndarray:
    return formats.read_features(path).data


def _params(ckpt, dim, metric="cosine") -> MetricParams:
    if ckpt:
        params = formats.load_checkpoint(ckpt)
        if params.dim != dim:
            raise formats.ConfigMismatchError(f"{ckpt}: checkpoint dimension {params.dim} != feature dimension {dim}")
        return params
    v = Variant(metric)
    if v is Variant.BLOCKDIAG:
        raise UsageError("bdiag evaluation needs --ckpt")
    return init_identity(MetricConfig(v, dim))


def _ground_truth(path, n_queries, n_gallery) -> GroundTruth:
    if not path:
        if n_queries != n_gallery:
            raise UsageError("--gt is required when query and gallery sizes differ")
        return GroundTruth.one_to_one(n_queries)
    try:
        lines = Path(path).read_text().splitlines()
        rel = [[int(t) for t in line.replace(",", " ").split()] for line in lines if line.strip()]
        return GroundTruth(rel, n_gallery)
    except ValueError as e:
        raise formats.FormatError(f"{path}: {e}") from e


def cmd_train(args, out):
    X, Y = _features(args.features_x), _features(args.features_y)
    cfg = _metric_config(args, X.shape[1])
    tc = TrainConfig(loss=_loss_spec(args), epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                     optimizer=args.optimizer, weight_decay=args.weight_decay,
                     weight_dropout=args.weight_dropout, seed=args.seed, init=args.init)
    result = train(X, Y, cfg, tc)
    for epoch, loss in enumerate(result.history):
        print(f"epoch={epoch} loss={loss:.6f}", file=out)
    formats.save_checkpoint(args.out, result.params)
    print(f"wrote {args.out}", file=out)


def cmd_eval(args, out):
    X, Y = _features(args.features_x), _features(args.features_y)
    params = _params(args.ckpt, X.shape[1], args.metric)
    report = evaluate(score_matrix(X, Y, params), _ground_truth(args.gt, len(X), len(Y)))
    out.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())


def cmd_gradcheck(args, out):
    cfg = _metric_config(args, args.dim)
    err = run_gradcheck(cfg, _loss_spec(args), trials=args.trials, seed=args.seed, batch=args.batch)
    ok = err < GRADCHECK_TOL
    print(f"max_relative_error={err:.3e} tolerance={GRADCHECK_TOL:.0e} {'PASS' if ok else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args, out):
    try:
        spec = parse_spec_text(Path(args.spec_file).read_text())
    except OSError as e:
        raise OSError(f"{args.spec_file}: {e.strerror or e}") from e
    except ValueError as e:
        raise UsageError(f"{args.spec_file}: {e}") from e
    X, Y, _, _ = synth_gen(spec)
    formats.write_features(args.out_x, X)
    formats.write_features(args.out_y, Y)
    print(f"wrote {spec.pairs} pairs of dimension {spec.dim}", file=out)


def cmd_align(args, out):
    A, B = _features(args.tokens_a), _features(args.tokens_b)
    params = _params(args.ckpt, A.shape[1])
    score = apps.token_alignment_score(A, B, params, args.strategy, args.tau)
    print(f"strategy={args.strategy} score={score:.6f}", file=out)


def cmd_attention(args, out):
    Q, K, V = _features(args.query), _features(args.key), _features(args.value)
    params = _params(args.ckpt, Q.shape[1])
    formats.write_features(args.out, apps.metric_attention(Q, K, V, params, args.temperature))
    print(f"wrote {args.out}", file=out)


def cmd_distill(args, out):
    X, Y = _features(args.features_x), _features(args.features_y)
    teacher = formats.load_checkpoint(args.teacher_ckpt)
    student = _params(args.student_ckpt, X.shape[1])
    S_s = score_matrix(X, Y, student)
    task = loss_value(S_s, _loss_spec(args))
    kl = apps.distill_kl(score_matrix(X, Y, teacher), S_s, args.tau)
    print(f"task={task:.6f} kl={kl:.6f} total={task + kl:.6f}", file=out)


def cmd_stats(args, out):
    X, Y = _features(args.features_x), _features(args.features_y)
    params = _params(args.ckpt, X.shape[1])
    S = score_matrix(X, Y, params)
    centers, pos, neg = similarity_histogram(S, _ground_truth(args.gt, len(X), len(Y)), args.bins)
    Path(args.out).write_text(histogram_text(centers, pos, neg))
    print(f"positives={int(pos.sum())} negatives={int(neg.sum())} wrote {args.out}", file=out)


def cmd_inspect(args, out):
    params = formats.load_checkpoint(args.ckpt)
    cfg = params.config
    W = materialize_dense(params).astype(np.float64)
    stored = params.weights.astype(np.float64)
    total = np.abs(W).sum()
    diag_frac = float(np.abs(np.diag(W)).sum() / total) if total > 0 else 0.0
    print(f"variant={cfg.variant.value}", file=out)
    print(f"dim={cfg.dim}", file=out)
    print(f"block_size={cfg.block_size}", file=out)
    print(f"param_count={param_count(cfg)}", file=out)
    if stored.size:
        print(f"weight_min={stored.min():.6f}", file=out)
        print(f"weight_max={stored.max():.6f}", file=out)
        print(f"weight_mean={stored.mean():.6f}", file=out)
    print(f"diagonal_mass_fraction={diag_frac:.6f}", file=out)


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
    "align": cmd_align, "attention": cmd_attention, "distill": cmd_distill, "stats": cmd_stats,
    "inspect": cmd_inspect,
}


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = parse_kv(Path(known.config).read_text())
    except OSError as e:
        raise OSError(f"{known.config}: {e.strerror or e}") from e
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        code = COMMANDS[args.command](args, out)
        return EXIT_OK if code is None else code
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (formats.FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
