"""Command-line front end: simulate, train, predict, evaluate, export-pwm.

Exit codes: 0 success, 1 runtime or model error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dp
from .dataio import (export_pwm, load_model, load_pbm_table, save_model, save_table,
                     simulate)
from .em import TrainConfig, joint_loglik, predict_batch, train, train_two_stage
from .errors import RegHmmError
from .metrics import evaluate
from .model import (ALPHABET, DEFAULT_ENTRY_RATE, HmmParams, Link, RegressionParams,
                    StateSpace, SummaryMode, SummarySpec, default_initial, encode, tie_emissions)

log = logging.getLogger("reghmm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _require_input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _claim_output(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"refusing to overwrite {p} (use --force)")
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("REGHMM_THREADS", "")
    try:
        return max(int(env), 0) if env else 0
    except ValueError:
        raise UsageError(f"REGHMM_THREADS must be an integer, got {env!r}") from None


def _apply_threads(n: int) -> None:
    if n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _read_sequences(path) -> list[str]:
    """First column of a sequence list or PBM table; a header row is skipped."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            parts = line.replace(",", "\t").split()
            if not parts:
                continue
            if i == 0 and len(parts) > 1 and not _is_number(parts[1]):
                continue
            out.append(parts[0].upper())
    return out


def _is_number(text) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _train_config(args) -> TrainConfig:
    return TrainConfig(K=args.motif_len, max_iters=args.max_iters, rel_tol=args.rel_tol,
                       d_init=args.d_init, d_cap=args.d_cap,
                       coverage_threshold=args.coverage, summary=args.summary, link=args.link,
                       position_dependent=not args.shared_transitions, seed=args.seed,
                       emission_floor=args.emission_floor, sigma_floor=args.sigma_floor,
                       dominance=args.dominance, entry_rate=args.entry_rate,
                       seeding=args.seeding, n_restarts=args.restarts, patience=args.patience,
                       threads=_threads(args))


# -- subcommands -------------------------------------------------------------

def _truth_model(args, rng):
    K, L = args.motif_len, args.len
    space = StateSpace(K)
    bg = np.array([float(v) for v in args.background.split(",")])
    if bg.shape != (4,) or bg.min() <= 0:
        raise UsageError("--background needs four positive frequencies")
    motif = args.motif or "".join(rng.choice(list(ALPHABET), size=K))
    if len(motif) != K:
        raise UsageError(f"--motif must have length --motif-len={K}")
    encode(motif)
    E = np.empty((space.n_states, 4))
    E[0] = bg / bg.sum()
    other = (1.0 - args.dominance) / 3.0
    for k, ch in enumerate(motif.upper(), start=1):
        row = np.full(4, other)
        row[ALPHABET.index(ch)] = args.dominance
        E[space.sense(k)] = row
        E[space.complement(space.sense(k))] = row[::-1]
    e = args.entry_rate
    params = HmmParams(space=space, emissions=tie_emissions(E),
                       transitions=np.tile([1 - 2 * e, e, e], (L - 1, 1)),
                       initial=default_initial(space, e), position_dependent=True)
    gamma = RegressionParams(link=Link(args.link), alpha=args.alpha, beta=args.beta,
                             s=args.slope, t=args.threshold, sigma=args.sigma)
    return params, gamma, SummarySpec(SummaryMode(args.summary))


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0 < args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in (0, 1)")
    out = Path(args.out_dir)
    paths = [_claim_output(out / name, args.force)
             for name in ("train.tsv", "test.tsv", "truth.json")]
    root = np.random.SeedSequence(args.seed)
    truth_ss, train_ss, test_ss = root.spawn(3)
    params, gamma, spec = _truth_model(args, np.random.default_rng(truth_ss))
    n_test = int(round(args.n * args.test_fraction))
    n_train = args.n - n_test
    if n_train < 1 or n_test < 1:
        raise UsageError("--n too small for a train/test split")
    save_table(simulate(params, gamma, spec, n_train, train_ss), paths[0])
    save_table(simulate(params, gamma, spec, n_test, test_ss), paths[1])
    save_model(paths[2], params, gamma, spec)
    print(f"wrote {n_train} train and {n_test} test sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    src = _require_input(args.input)
    model_out = _claim_output(args.model_out, args.force)
    trace_out = _claim_output(args.trace_out, args.force) if args.trace_out else None
    cfg = _train_config(args)
    _apply_threads(cfg.threads)
    data = load_pbm_table(src, log_transform=args.log_transform, truncate_to=args.truncate)
    fit = train if args.method == "joint" else train_two_stage
    params, gamma, trace = fit(data, cfg)
    save_model(model_out, params, gamma, cfg.spec)
    if trace_out:
        trace.write(trace_out)
    print(json.dumps({"method": args.method, "iterations": len(trace),
                      "joint_loglik": max(trace.loglik), "alpha": gamma.alpha,
                      "beta": gamma.beta, "sigma": gamma.sigma}))
    return EXIT_OK


def _predict_rows(seqs, params, gamma, cfg):
    """(prediction, status) per sequence; unusable rows get nan and a reason."""
    preds = np.full(len(seqs), np.nan)
    status = ["ok"] * len(seqs)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        try:
            encode(s)
        except RegHmmError as exc:
            status[i] = f"error: {exc}"
            continue
        groups.setdefault(len(s), []).append(i)
    for n, idx in groups.items():
        try:
            p = dp.for_length(params, n)
        except RegHmmError as exc:
            for i in idx:
                status[i] = f"error: {exc}"
            continue
        yhat, flagged = predict_batch([seqs[i] for i in idx], p, gamma, cfg)
        for i, v, f in zip(idx, yhat, flagged):
            preds[i] = v
            if f:
                status[i] = "under-covered"
    return preds, status


def cmd_predict(args) -> int:
    src = _require_input(args.input)
    model = _require_input(args.model)
    out = _claim_output(args.out, args.force)
    _apply_threads(_threads(args))
    params, gamma, spec = load_model(model)
    cfg = TrainConfig(K=params.K, summary=spec.mode, link=gamma.link, d_init=args.d_init,
                      d_cap=args.d_cap, coverage_threshold=args.coverage)
    seqs = _read_sequences(src)
    if args.truncate:
        seqs = [s[:args.truncate] for s in seqs]
    preds, status = _predict_rows(seqs, params, gamma, cfg)
    with out.open("w", encoding="utf-8") as fh:
        for s, p, st in zip(seqs, preds, status):
            fh.write(f"{s}\t{float(p)!r}\t{st}\n")
    bad = sum(1 for st in status if st.startswith("error"))
    if bad:
        log.warning("%d rows could not be scored", bad)
    return EXIT_OK


def _read_predictions(path):
    seqs, preds = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or not _is_number(parts[1]):
                continue
            seqs.append(parts[0])
            preds.append(float(parts[1]))
    return seqs, np.array(preds)


def _align(pred_seqs, obs_seqs) -> np.ndarray:
    """Index of the prediction row for each observation, in file order.

    The loader drops unusable rows that predict still lists, so the
    observations must form an ordered subsequence of the prediction rows.
    """
    idx = []
    j = 0
    for i, s in enumerate(pred_seqs):
        if j < len(obs_seqs) and s == obs_seqs[j]:
            idx.append(i)
            j += 1
    if j < len(obs_seqs):
        raise UsageError(f"observation row {j + 1} ({obs_seqs[j]}) has no matching prediction")
    return np.array(idx, dtype=np.int64)


def cmd_evaluate(args) -> int:
    pred_path = _require_input(args.predictions)
    obs_path = _require_input(args.observations)
    out = _claim_output(args.out, args.force) if args.out else None
    pseqs, preds = _read_predictions(pred_path)
    data = load_pbm_table(obs_path, log_transform=args.log_transform, truncate_to=args.truncate)
    preds = preds[_align(pseqs, data.sequences)]
    keep = np.isfinite(preds)
    ll = None
    if args.model:
        params, gamma, spec = load_model(_require_input(args.model))
        cfg = TrainConfig(K=params.K, summary=spec.mode, link=gamma.link)
        ll = joint_loglik(data, params, gamma, cfg) / len(data)
    report = evaluate(preds[keep], data.y[keep], heldout_loglik_per_seq=ll)
    doc = report.as_dict()
    skipped = len(pseqs) - int(keep.sum())
    if skipped:
        doc["skipped"] = skipped
    text = json.dumps(doc, indent=1)
    if out:
        out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_export_pwm(args) -> int:
    model = _require_input(args.model)
    out = _claim_output(args.out, args.force)
    params, _, _ = load_model(model)
    export_pwm(params, out, name=args.name)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--method", choices=("joint", "two-stage"), default="joint")
    p.add_argument("--motif-len", type=_positive_int, default=d.K)
    p.add_argument("--link", choices=[m.value for m in Link], default=d.link.value)
    p.add_argument("--summary", choices=[m.value for m in SummaryMode], default=d.summary.value)
    p.add_argument("--shared-transitions", action="store_true",
                   help="one transition row for every position")
    p.add_argument("--max-iters", type=_positive_int, default=d.max_iters)
    p.add_argument("--rel-tol", type=float, default=d.rel_tol)
    p.add_argument("--d-init", type=_positive_int, default=d.d_init)
    p.add_argument("--d-cap", type=_positive_int, default=d.d_cap)
    p.add_argument("--coverage", type=float, default=d.coverage_threshold)
    p.add_argument("--emission-floor", type=float, default=d.emission_floor)
    p.add_argument("--sigma-floor", type=float, default=d.sigma_floor)
    p.add_argument("--dominance", type=float, default=d.dominance)
    p.add_argument("--entry-rate", type=float, default=d.entry_rate)
    p.add_argument("--seeding", choices=("frequency", "response"), default=d.seeding)
    p.add_argument("--restarts", type=_positive_int, default=d.n_restarts)
    p.add_argument("--patience", type=_positive_int, default=d.patience)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reghmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads, 0 = auto (default: $REGHMM_THREADS or 0)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="draw a synthetic train/test split")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--len", type=_positive_int, default=20)
    p.add_argument("--motif-len", type=_positive_int, default=5)
    p.add_argument("--motif", default=None, help="consensus K-mer (default: random)")
    p.add_argument("--dominance", type=float, default=0.97)
    p.add_argument("--background", default="0.25,0.25,0.25,0.25")
    p.add_argument("--entry-rate", type=float, default=DEFAULT_ENTRY_RATE)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--slope", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--link", choices=[m.value for m in Link], default="linear")
    p.add_argument("--summary", choices=[m.value for m in SummaryMode], default="all")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a model to a sequence/intensity table")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--trace-out", default=None, help="per-iteration JSON lines")
    p.add_argument("--log-transform", action="store_true")
    p.add_argument("--truncate", type=_positive_int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict responses for sequences")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truncate", type=_positive_int, default=None)
    p.add_argument("--d-init", type=_positive_int, default=dp.DEFAULT_D_INIT)
    p.add_argument("--d-cap", type=_positive_int, default=dp.DEFAULT_D_CAP)
    p.add_argument("--coverage", type=float, default=dp.DEFAULT_COVERAGE)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against observations")
    common(p, seed=False)
    p.add_argument("--predictions", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--model", default=None, help="also report held-out log-likelihood")
    p.add_argument("--out", default=None)
    p.add_argument("--log-transform", action="store_true")
    p.add_argument("--truncate", type=_positive_int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-pwm", help="write the motif in MEME format")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="reghmm")
    p.set_defaults(func=cmd_export_pwm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 0:
            raise UsageError("--threads must be >= 0")
        return args.func(args)
    except UsageError as exc:
        print(f"reghmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RegHmmError, OSError, ArithmeticError) as exc:
        print(f"reghmm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
