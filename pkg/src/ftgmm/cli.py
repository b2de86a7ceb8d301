"""Command-line entry point: ``ftgmm synth | fit | eval | bench``.

Exit codes: 0 success, 1 numeric failure during a fit, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import CsvError, SyntheticSpec, TrueModel, Transform, load_csv, save_csv, split_indices, synth_dataset
from .fit import METHODS, FitError, RunConfig, run_pipeline
from .metrics import as_dense, avg_nll, cov_err, dense_avg_nll, match_components, mean_err
from .model import GmmParams

CHECKPOINT_FORMAT = "ftgmm.checkpoint"


class ConfigError(ValueError):
    """Bad user input: unreadable config, unknown field, dimension mismatch."""


# -- file helpers ------------------------------------------------------------------


def _read_json(path, what="config"):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(path):
    try:
        return load_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read data {path}: {exc.strerror}") from None
    except CsvError as exc:
        raise ConfigError(str(exc)) from None


def _load_truth(path, n):
    d = _read_json(path, "truth")
    try:
        truth = TrueModel.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a true-model file ({exc})") from None
    if truth.n != n:
        raise ConfigError(f"truth has dimension {truth.n} but the data has {n} columns")
    return truth


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- config assembly ---------------------------------------------------------------

_FLAG_FIELDS = {
    "mode": "mode",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "retraction": "retraction",
    "lr": "eta_max",
    "K": "K",
    "geometry": "geometry",
    "engine": "engine",
}


def build_config(args) -> RunConfig:
    """Config file first, then ``--method``, then individual flags."""
    base = _read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise ConfigError(f"{args.config}: top level must be a JSON object")
    d = dict(base)
    file_method = d.pop("method", None)
    method = getattr(args, "method", None) or file_method
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"field 'method': unknown method {method!r}; expected one of {sorted(METHODS)}")
        d["optimizer"], d["geometry"], d["mode"] = METHODS[method]
    opt = getattr(args, "optimizer", None)
    if opt is not None:
        # "acclip" or the combined "acclip-manifold"
        name, _, geometry = opt.partition("-")
        d["optimizer"] = name
        if geometry:
            d["geometry"] = geometry
    for flag, fieldname in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            d[fieldname] = value
    # a lone mode or geometry drags the other along
    if "mode" in d and "geometry" not in d:
        d["geometry"] = "manifold" if d["mode"] == "orthogonal" else "euclidean"
    elif "geometry" in d and "mode" not in d:
        d["mode"] = "orthogonal" if d["geometry"] == "manifold" else "unconstrained"
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args):
    try:
        spec = SyntheticSpec(args.n, args.K, args.c, args.e, args.size, args.structure, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model, X = synth_dataset(spec)
    out = _outdir(args.out)
    _write_json(out / "truth.json", model.to_dict())
    save_csv(out / "samples.csv", X, header=[f"x{j}" for j in range(spec.n)])
    print(f"wrote {out / 'truth.json'} and {out / 'samples.csv'} ({spec.size} x {spec.n})")
    return 0


def _checkpoint(result, prep, config, n_rows):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": config.to_dict(),
        "params": result.params.to_dict(),
        "prior": result.prior.to_dict(),
        "transform": prep.transform.to_dict(),
        "n_rows": int(n_rows),
    }


def cmd_fit(args):
    config = build_config(args)
    X = _load_data(args.data)
    truth = _load_truth(args.truth, X.shape[1]) if args.truth else None
    if X.shape[0] < 5:
        raise ConfigError(f"{args.data}: need at least 5 rows, got {X.shape[0]}")
    out = _outdir(args.out)
    try:
        result, prep = run_pipeline(X, config, truth=truth)
    except FitError as exc:
        if exc.report is not None:
            _write_json(out / "report.json", exc.report.to_dict())
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 1
    report = result.report
    _write_json(out / "report.json", report.to_dict())
    (out / "trace.csv").write_text(report.trace_csv(), encoding="utf-8")
    _write_json(out / "checkpoint.json", _checkpoint(result, prep, config, X.shape[0]))
    line = f"{config.method}: final test avg NLL {report.test_avg_nll[-1]:.6f}"
    if truth is not None:
        line += f" (true model {report.true_test_avg_nll:.6f}), cov_err {report.cov_err:.4f}, mean_err {report.mean_err:.6f}"
    print(line)
    return 0


def evaluate(checkpoint: dict, X, truth=None, which="test") -> dict:
    """Score a checkpoint on ``X``; ``which`` picks the rows by re-deriving the split."""
    if checkpoint.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("not a checkpoint file")
    config = RunConfig.from_dict(checkpoint["config"])
    params = GmmParams.from_dict(checkpoint["params"])
    transform = Transform.from_dict(checkpoint["transform"])
    if X.shape[1] != transform.mean.shape[0]:
        raise ConfigError(f"checkpoint expects {transform.mean.shape[0]} columns, data has {X.shape[1]}")
    if which == "all":
        rows = X
    else:
        if X.shape[0] != checkpoint["n_rows"]:
            raise ConfigError(
                f"--split {which} needs the data the checkpoint was fit on ({checkpoint['n_rows']} rows), got {X.shape[0]}"
            )
        tr, te = split_indices(X.shape[0], config.train_fraction, config.seed)
        rows = X[tr if which == "train" else te]
    Y = transform.apply(rows)
    out = {"split": which, "n_points": int(rows.shape[0]), "avg_nll": avg_nll(Y, params)}
    if truth is not None:
        est = transform.model_to_input(as_dense(params))
        perm = match_components(est, truth)
        out["cov_err"] = cov_err(est, truth, perm)
        out["mean_err"] = mean_err(est, truth, perm)
        out["true_avg_nll"] = dense_avg_nll(Y, transform.model_from_input(truth))
        out["matching"] = perm.tolist()
    return out


def cmd_eval(args):
    ckpt = _read_json(args.checkpoint, "checkpoint")
    if not isinstance(ckpt, dict):
        raise ConfigError(f"{args.checkpoint}: not a checkpoint file")
    X = _load_data(args.data)
    truth = _load_truth(args.truth, X.shape[1]) if args.truth else None
    try:
        metrics = evaluate(ckpt, X, truth, args.split)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{args.checkpoint}: malformed checkpoint ({exc})") from None
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- bench ---------------------------------------------------------------------------

RUN_COLUMNS = [
    "separation", "size", "method", "seed", "status",
    "test_avg_nll", "true_test_avg_nll", "cov_err", "mean_err", "seconds",
]
TABLE_COLUMNS = [
    "separation", "size", "method", "runs", "failures",
    "test_avg_nll", "true_test_avg_nll", "cov_err", "mean_err", "seconds",
]

SWEEP_DEFAULTS = {
    "n": 5,
    "K": 5,
    "e": 10.0,
    "structure": "orthogonal",
    "separations": [0.1, 1.0, 5.0],
    "sizes": [25000],
    "methods": ["adam-euclidean", "acclip-euclidean", "adam-manifold", "acclip-manifold"],
    "seeds": 10,
    "config": {},
}


def parse_sweep(d) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("sweep: top level must be a JSON object")
    unknown = sorted(set(d) - set(SWEEP_DEFAULTS))
    if unknown:
        raise ConfigError(f"sweep: unknown field(s): {', '.join(unknown)}")
    sweep = {**SWEEP_DEFAULTS, **d}
    seeds = sweep["seeds"]
    sweep["seeds"] = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    for m in sweep["methods"]:
        if m not in METHODS:
            raise ConfigError(f"sweep: field 'methods': unknown method {m!r}")
    if not isinstance(sweep["config"], dict):
        raise ConfigError("sweep: field 'config' must be an object")
    for key in ("separations", "sizes", "methods"):
        if not sweep[key]:
            raise ConfigError(f"sweep: field {key!r} is empty")
    return sweep


def bench_cells(sweep):
    for c in sweep["separations"]:
        for size in sweep["sizes"]:
            for method in sweep["methods"]:
                for seed in sweep["seeds"]:
                    yield float(c), int(size), method, int(seed)


def run_cell(sweep, c, size, method, seed) -> dict:
    """One (separation, size, method, seed) run, scored against its truth."""
    spec = SyntheticSpec(sweep["n"], sweep["K"], c, sweep["e"], size, sweep["structure"], seed)
    truth, X = synth_dataset(spec)
    config = RunConfig.from_dict({**sweep["config"], "method": method, "K": sweep["K"], "seed": seed})
    row = {"separation": c, "size": size, "method": method, "seed": seed}
    try:
        result, _ = run_pipeline(X, config, truth=truth)
    except FitError as exc:
        row.update(status=str(exc), test_avg_nll=np.nan, true_test_avg_nll=np.nan, cov_err=np.nan,
                   mean_err=np.nan, seconds=np.nan)
        return row
    r = result.report
    row.update(status="ok", test_avg_nll=r.test_avg_nll[-1], true_test_avg_nll=r.true_test_avg_nll,
               cov_err=r.cov_err, mean_err=r.mean_err, seconds=float(np.sum(r.epoch_seconds)))
    return row


def _run_cell_args(a):
    return run_cell(*a)


def aggregate(rows) -> list[dict]:
    """Mean over seeds of the successful runs of each cell."""
    groups = {}
    for r in rows:
        groups.setdefault((r["separation"], r["size"], r["method"]), []).append(r)
    table = []
    for (c, size, method), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        entry = {"separation": c, "size": size, "method": method, "runs": len(rs), "failures": len(rs) - len(ok)}
        for col in TABLE_COLUMNS[5:]:
            entry[col] = float(np.mean([r[col] for r in ok])) if ok else float("nan")
        table.append(entry)
    return table


def _write_rows(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def run_bench(sweep, workers=1, progress=None) -> tuple[list[dict], list[dict]]:
    cells = [(sweep, *cell) for cell in bench_cells(sweep)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell_args, cells))
    else:
        rows = []
        for cell in cells:
            rows.append(run_cell(*cell))
            if progress is not None:
                progress(rows[-1])
    return rows, aggregate(rows)


def cmd_bench(args):
    sweep = parse_sweep(_read_json(args.sweep, "sweep"))
    try:
        RunConfig.from_dict({**sweep["config"], "method": sweep["methods"][0], "K": sweep["K"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep: field 'config': {exc}") from None
    out = _outdir(args.out)

    def progress(row):
        print(f"c={row['separation']} size={row['size']} {row['method']} seed={row['seed']}: "
              f"{row['status']} test={row['test_avg_nll']:.4f}", flush=True)

    rows, table = run_bench(sweep, args.workers, None if args.quiet else progress)
    _write_rows(out / "runs.csv", RUN_COLUMNS, rows)
    _write_rows(out / "table.csv", TABLE_COLUMNS, table)
    print(f"wrote {out / 'runs.csv'} and {out / 'table.csv'}")
    return 0


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftgmm", description="Flexibly-tied Gaussian mixtures fit by stochastic optimization.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a ground-truth mixture and samples")
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--K", type=int, default=5)
    s.add_argument("--c", type=float, default=1.0, help="separation threshold")
    s.add_argument("--e", type=float, default=10.0, help="eccentricity")
    s.add_argument("--size", type=int, default=2500)
    s.add_argument("--structure", choices=["random", "orthogonal"], default="orthogonal")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a mixture to a CSV file")
    f.add_argument("data", help="CSV data file")
    f.add_argument("--config", help="JSON run config")
    f.add_argument("--method", choices=sorted(METHODS))
    f.add_argument("--mode", choices=["unconstrained", "plu", "orthogonal"])
    f.add_argument("--optimizer", help="adam, acclip or sgd, optionally suffixed -euclidean/-manifold")
    f.add_argument("--geometry", choices=["euclidean", "manifold"])
    f.add_argument("--K", type=int)
    f.add_argument("--epochs", type=int)
    f.add_argument("--batch-size", dest="batch_size", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--retraction", choices=["qr", "polar", "cayley"])
    f.add_argument("--lr", type=float, help="peak learning rate")
    f.add_argument("--engine", choices=["numba", "numpy"])
    f.add_argument("--truth", help="true-model JSON for error indices")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--truth")
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--out", help="metrics JSON path (also printed)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a separation x size x method x seed sweep")
    b.add_argument("sweep", help="sweep JSON")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--quiet", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
