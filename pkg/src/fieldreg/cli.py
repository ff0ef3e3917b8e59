"""Command-line entry point: gen-data, train, eval, uq, predict.

Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O or format error.
Heavy outputs go to files; stdout gets a one-line summary and a
``key=value`` metrics line. Wall-clock data appears only in manifests.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import (
    ConfigError,
    DegenerateData,
    FormatError,
    InsufficientSamples,
    InvalidArgument,
    NumericalFailure,
)
from .field import Dataset, dataset_read, dataset_write, read_csv, write_csv, write_ppm
from .plate import FemPredictor, generate_dataset
from .train import (
    Normalizer,
    Surrogate,
    check_schema,
    evaluate,
    fit,
    history_csv,
    surrogate_from_bytes,
    surrogate_to_bytes,
)
from .cnn.network import build_network, init_parameters
from .uq import error_map, kde_pdf, pdf_l1_distance, run_uq, silverman_bandwidth, write_pdf_csv, write_uq

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _metrics(**kv):
    parts = []
    for k, v in kv.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    print(" ".join(parts))


def _write_manifest(out_dir, command, cfg, started, extra):
    lines = [
        f"command: {command}",
        f"fieldreg: {__version__}",
        f"started: {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))}",
        f"wall_seconds: {time.time() - started:.3f}",
    ]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    lines += ["config:", json.dumps(cfg.to_dict(), indent=2, sort_keys=True, default=str)]
    Path(out_dir, f"{command}.manifest.txt").write_text("\n".join(lines) + "\n")


def _out_dir(cfg, args):
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _read_dataset(path, what):
    try:
        return dataset_read(path)
    except OSError as exc:
        raise OSError(f"cannot read {what} dataset {path}: {exc.strerror or exc}") from exc


def _load_surrogate(cfg, out, args):
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.path("checkpoint", out)
    surrogate, _ = surrogate_from_bytes(Path(path).read_bytes(), cfg.network_spec())
    return surrogate, path


def cmd_gen_data(cfg, args):
    started = time.time()
    out = _out_dir(cfg, args)
    sampler = cfg.sampler()
    threads = _threads(args)
    written = []
    residuals = {}
    try:
        for stage, n, method, key in (
            ("train", cfg.data.n_train, cfg.data.train_sampling, "train_data"),
            ("test", cfg.data.n_test, cfg.data.test_sampling, "test_data"),
        ):
            ds = generate_dataset(cfg.case, n, sampler, cfg.fem, cfg.seed, stage, method, threads)
            path = cfg.path(key, out)
            dataset_write(ds, path)
            written.append(path)
            residuals[stage] = ds.residuals
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    res = np.concatenate(list(residuals.values()))
    stats = {
        "n_train": cfg.data.n_train,
        "n_test": cfg.data.n_test,
        "residual_max": float(res.max()),
        "residual_mean": float(res.mean()),
        "threads": threads,
    }
    _write_manifest(out, "gen-data", cfg, started, stats)
    print(f"wrote {cfg.data.n_train} training and {cfg.data.n_test} test samples for case {cfg.case} to {out}")
    _metrics(n_train=cfg.data.n_train, n_test=cfg.data.n_test, residual_max=float(res.max()))
    return EXIT_OK


def _read_history(path, upto):
    rows = []
    if not path.exists():
        return rows
    lines = path.read_text().splitlines()
    for line in lines[1:]:
        if line.strip() and int(line.split(",")[0]) <= upto:
            rows.append(line)
    return rows


def cmd_train(cfg, args):
    started = time.time()
    out = _out_dir(cfg, args)
    spec = cfg.network_spec()
    tcfg = cfg.train_config()
    train_ds = _read_dataset(cfg.path("train_data", out), "training")
    test_ds = _read_dataset(cfg.path("test_data", out), "test")
    net = build_network(spec)
    for ds, what in ((train_ds, "training"), (test_ds, "test")):
        try:
            check_schema(net, ds)
        except InvalidArgument as exc:
            raise ConfigError(f"{what} data: {exc}") from exc
    ckpt = cfg.path("checkpoint", out)
    hist_path = out / "history.csv"
    previous = []
    if args.resume:
        surrogate, _ = surrogate_from_bytes(Path(args.resume).read_bytes(), spec)
        previous = _read_history(hist_path, surrogate.epoch)
    else:
        surrogate = Surrogate(net, init_parameters(net, cfg.init_seed), Normalizer.fit(train_ds.x, train_ds.y))
    start_epoch = surrogate.epoch
    rows = fit(surrogate, train_ds, test_ds, tcfg)
    ckpt.write_bytes(surrogate_to_bytes(surrogate, cfg.names_in, cfg.names_out))
    text = history_csv(rows)
    if previous:
        head, *body = text.splitlines()
        text = "\n".join([head, *previous, *body]) + "\n"
    hist_path.write_text(text)
    if rows:
        last = rows[-1]
        test_rmse, test_r2 = last.test_rmse, last.test_r2
    else:
        test_rmse, test_r2, _ = evaluate(surrogate, test_ds, tcfg.eval_batch)
    _write_manifest(
        out,
        "train",
        cfg,
        started,
        {"start_epoch": start_epoch, "epochs": surrogate.epoch, "n_params": net.n_params, "checkpoint": ckpt},
    )
    print(f"trained {spec.n_convs()}-conv network to epoch {surrogate.epoch}; checkpoint {ckpt}")
    _metrics(epoch=surrogate.epoch, test_rmse=float(test_rmse), test_r2=float(test_r2))
    return EXIT_OK


def cmd_eval(cfg, args):
    started = time.time()
    out = _out_dir(cfg, args)
    surrogate, ckpt = _load_surrogate(cfg, out, args)
    test_ds = _read_dataset(cfg.path("test_data", out), "test")
    try:
        check_schema(surrogate.net, test_ds)
    except InvalidArgument as exc:
        raise ConfigError(f"test data: {exc}") from exc
    batch = cfg.train_config().eval_batch
    test_rmse, test_r2, pred = evaluate(surrogate, test_ds, batch)
    extra = {"checkpoint": ckpt, "epoch": surrogate.epoch, "n_test": len(test_ds)}
    if args.dump:
        pred_ds = Dataset(test_ds.x, pred, test_ds.names_in, test_ds.names_out, test_ds.seed)
        dump = out / "predictions.frds"
        dataset_write(pred_ds, dump)
        extra["predictions"] = dump
    _write_manifest(out, "eval", cfg, started, extra)
    print(f"evaluated checkpoint {ckpt} (epoch {surrogate.epoch}) on {len(test_ds)} test samples")
    _metrics(epoch=surrogate.epoch, test_rmse=float(test_rmse), test_r2=float(test_r2))
    return EXIT_OK


def cmd_uq(cfg, args):
    started = time.time()
    out = _out_dir(cfg, args)
    surrogate, ckpt = _load_surrogate(cfg, out, args)
    sampler = cfg.sampler()
    n = cfg.uq.n_samples
    probes = [tuple(p) for p in cfg.uq.probes] if cfg.uq.probes else None
    batch = cfg.train_config().eval_batch
    sur = run_uq(lambda x: surrogate.predict(x, batch), sampler, n, probes, cfg.seed, cfg.uq.chunk)
    names = cfg.names_out
    write_uq(sur, out, "surrogate_", names, cfg.uq.ppm)
    metrics = {"n_samples": n}
    extra = {"checkpoint": ckpt, "n_samples": n, "reference": args.reference, "probes": sur.probes}
    if args.reference == "fem":
        threads = _threads(args)
        fem = run_uq(FemPredictor(cfg.case, cfg.fem, threads), sampler, n, sur.probes, cfg.seed, cfg.uq.chunk)
        write_uq(fem, out, "fem_", names, cfg.uq.ppm)
        mean_map, mean_err = error_map(sur.mean_field, fem.mean_field)
        var_map, var_err = error_map(sur.var_field, fem.var_field)
        for c, nm in enumerate(names):
            for kind, emap in (("mean", mean_map), ("var", var_map)):
                write_csv(emap, out / f"error_{kind}_{nm}.csv", c)
                if cfg.uq.ppm:
                    write_ppm(emap, out / f"error_{kind}_{nm}.ppm", c)
        l1 = []
        for k, probe in enumerate(sur.probes):
            a, b = sur.probe_samples[:, k], fem.probe_samples[:, k]
            ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
            h = max(ha, hb)
            grid = np.linspace(min(a.min(), b.min()) - 3 * h, max(a.max(), b.max()) + 3 * h, 256)
            r, col, ch = probe
            write_pdf_csv(
                out / f"pdf_overlay_{k}_{names[ch]}_r{r}_c{col}.csv",
                [("y", grid), ("surrogate", kde_pdf(a, grid, ha)), ("fem", kde_pdf(b, grid, hb))],
            )
            l1.append(pdf_l1_distance(a, b))
        metrics.update(mean_err_max=mean_err, var_err_max=var_err, pdf_l1_max=float(max(l1)))
        extra.update(threads=threads, mean_err_max=mean_err, var_err_max=var_err)
    _write_manifest(out, "uq", cfg, started, extra)
    print(f"propagated {n} samples through the surrogate" + (" and the FEM reference" if args.reference == "fem" else ""))
    _metrics(**metrics)
    return EXIT_OK


def cmd_predict(cfg, args):
    out = _out_dir(cfg, args)
    surrogate, ckpt = _load_surrogate(cfg, out, args)
    if not args.input:
        raise ConfigError("predict needs --input with one CSV per input channel")
    if len(args.input) != len(cfg.names_in):
        raise ConfigError(f"case {cfg.case} takes {len(cfg.names_in)} input channel(s), got {len(args.input)} file(s)")
    x = np.concatenate([read_csv(p).data for p in args.input], axis=0)[None]
    h, w, c = surrogate.net.spec.in_shape
    if x.shape[1:] != (c, h, w):
        raise ConfigError(f"input grid {x.shape[2]}x{x.shape[3]} does not match the network's {h}x{w}")
    y = surrogate.predict(x)[0]
    paths = []
    for ch, nm in enumerate(cfg.names_out):
        p = out / f"pred_{nm}.csv"
        write_csv(y, p, ch)
        paths.append(str(p))
    print(f"predicted {', '.join(cfg.names_out)} with checkpoint {ckpt}")
    _metrics(outputs=",".join(paths))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "uq": cmd_uq,
    "predict": cmd_predict,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fieldreg", description="Convolutional field surrogate for random plate fields")
    parser.add_argument("--version", action="version", version=f"fieldreg {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, help="worker cap for FEM solves (default: all cores)")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample inputs and solve the plate for train/test sets")
    p = sub.add_parser("train", parents=[common], help="fit the surrogate")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="test-set RMSE and R^2")
    p.add_argument("--checkpoint")
    p.add_argument("--dump", action="store_true", help="write predictions.frds")
    p = sub.add_parser("uq", parents=[common], help="Monte Carlo moments and PDFs through the surrogate")
    p.add_argument("--checkpoint")
    p.add_argument("--reference", choices=["fem", "none"], default="none")
    p = sub.add_parser("predict", parents=[common], help="map one input field to its output fields")
    p.add_argument("--checkpoint")
    p.add_argument("--input", nargs="+", help="one CSV grid per input channel")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must fit in u64")
            cfg = replace(cfg, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DegenerateData, InsufficientSamples) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
